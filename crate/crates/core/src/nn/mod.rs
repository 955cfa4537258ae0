//! Numeric substrate: tensors, the differentiation tape, layers, gradient
//! checking, optimization and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, check_param_gradients, GradCheckOptions, GradCheckReport};
pub use graph::{BackwardArgs, BackwardFn, Gradients, Graph, Var};
pub use layers::{Blstmp, BlstmpLayer, Linear, LstmCell};
pub use optim::{sgd_step, Adam, LrScales, Sgd};
pub use params::ParamStore;
pub use tensor::{dot, log_add_exp, log_softmax_slice, log_sum_exp, softmax_slice, Tensor};
