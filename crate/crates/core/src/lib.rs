//! Lightweight Sinc-Convolutions: a learnable raw-audio front-end with a
//! hybrid CTC/attention speech recognition back-end.
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`audio`] | PCM16 WAV reading and 25 ms / 10 ms framing |
//! | [`nn`] | Tensors, reverse-mode tape, LSTM/BLSTMP layers, gradient checks, optimizers, checkpoints |
//! | [`sinc`] | Learnable band-pass Sinc filters with mel initialization |
//! | [`frontend`] | Depthwise-convolution stack and parameter accounting |
//! | [`augment`] | Time/channel masking and time warping of feature sequences |
//! | [`ctc`] | CTC loss, greedy decoding and prefix scoring |
//! | [`attention`] | Location-aware attention decoder and joint loss |
//! | [`decoding`] | Joint CTC/attention beam search with shallow LM fusion |
//! | [`model`] | The full model wired together |
//! | [`train`] | Toy tone corpus and the training loop |
//! | [`config`] | TOML run configuration |
//! | [`export`] | Feature files, filter tables and SVG plots |
//! | [`diagnostics`] | Gradient checks of every differentiable operation |
//! | [`cli`] | The `lsc` command-line tool |

pub mod attention;
pub mod audio;
pub mod augment;
pub mod cli;
pub mod config;
pub mod ctc;
pub mod decoding;
pub mod diagnostics;
pub mod error;
pub mod export;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod sinc;
pub mod train;

pub use error::{Error, Result};
