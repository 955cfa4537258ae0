use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Slot {
    value: Arc<Tensor>,
    grad: Tensor,
}

/// Named trainable tensors with matching gradient accumulators.
///
/// Names iterate in lexicographic order, which keeps serialization and
/// optimizer updates deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(
            name,
            Slot {
                value: Arc::new(value),
                grad,
            },
        );
        Ok(())
    }

    /// Inserts a tensor drawn uniformly from `[-bound, bound]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.insert(name, Tensor::from_vec(shape, data))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| s.value.as_ref())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub(crate) fn get_shared(&self, name: &str) -> Result<Arc<Tensor>> {
        self.slots
            .get(name)
            .map(|s| s.value.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots
            .get_mut(name)
            .map(|s| Arc::make_mut(&mut s.value))
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "ParamStore::set",
                left: slot.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.grad)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Adds `grad` into the accumulator for `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if slot.grad.shape() != grad.shape() {
            return Err(Error::Dimension {
                op: "ParamStore::accumulate",
                left: slot.grad.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        slot.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), s.value.as_ref()))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.slots
            .iter_mut()
            .map(|(k, s)| (k.as_str(), Arc::make_mut(&mut s.value), &mut s.grad))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.slots
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, s)| s.value.len())
            .sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.slots
            .values()
            .flat_map(|s| s.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn accumulation_is_additive_until_reset() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![0.0, 0.0])).unwrap();
        store.accumulate("w", &Tensor::row(vec![1.0, 2.0])).unwrap();
        store.accumulate("w", &Tensor::row(vec![1.0, 2.0])).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(store.get("w").unwrap().data(), &[0.0, 0.0]);
        store.zero_grads();
        assert_eq!(store.grad("w").unwrap().data(), &[0.0, 0.0]);
        assert!(store.accumulate("w", &Tensor::scalar(1.0)).is_err());
    }
}
