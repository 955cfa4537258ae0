//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and a backward
//! closure. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar node with respect to every node that depends on a
//! trainable leaf. Parameter values are never mutated by the graph.

use std::collections::HashMap;
use std::sync::Arc;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Forward values of the parents, in the order they were given.
    pub inputs: &'a [&'a Tensor],
    /// This node's forward value.
    pub output: &'a Tensor,
    /// Whether each parent needs a gradient. Closures may return `None` for
    /// parents that don't.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Arc<Tensor>,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Arc::new(value), vec![], None, false)
    }

    /// A free input that receives a gradient (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Arc::new(value), vec![], None, true)
    }

    /// The node bound to parameter `name`, created on first use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get_shared(name)?;
        let v = self.push(value, vec![], None, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation with a hand-written backward rule.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor,
        backward: impl Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Arc::new(value), parents.to_vec(), backward, requires_grad)
    }

    /// Gradients of the scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                left: out.shape().to_vec(),
                right: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(out.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| self.value(*p)).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = backward(&BackwardArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                debug_assert_eq!(
                    pg.shape(),
                    self.value(*parent).shape(),
                    "gradient shape mismatch for parent of node {idx}"
                );
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[idx] = Some(grad);
        }
        let params = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Parameter gradients by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.get(*v).map(|g| (name.as_str(), g)))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.params() {
            store.accumulate(name, g)?;
        }
        Ok(())
    }
}
