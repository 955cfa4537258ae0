use std::collections::BTreeMap;

use super::{ParamStore, Tensor};

/// Plain SGD with optional momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    scales: LrScales,
    velocity: BTreeMap<String, Tensor>,
}

/// Per-parameter learning-rate multipliers selected by name prefix; the
/// first matching prefix wins and unmatched names use 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LrScales(pub Vec<(String, f64)>);

impl LrScales {
    pub fn get(&self, name: &str) -> f64 {
        self.0
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(1.0, |(_, s)| *s)
    }
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            scales: LrScales::default(),
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_scales(mut self, scales: LrScales) -> Self {
        self.scales = scales;
        self
    }

    /// `value -= lr * step` for every parameter, then zeroes gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        for (name, value, grad) in store.iter_mut() {
            let step = if self.momentum > 0.0 {
                let v = self
                    .velocity
                    .entry(name.to_string())
                    .or_insert_with(|| Tensor::zeros(grad.shape()));
                for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
                    *vi = self.momentum * *vi + gi;
                }
                v.clone()
            } else {
                grad.clone()
            };
            let lr = self.lr * self.scales.get(name);
            for (w, s) in value.data_mut().iter_mut().zip(step.data()) {
                *w -= lr * s;
            }
        }
        store.zero_grads();
    }
}

/// Adam with bias-corrected first and second moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    scales: LrScales,
    steps: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scales: LrScales::default(),
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_scales(mut self, scales: LrScales) -> Self {
        self.scales = scales;
        self
    }

    /// One update of every parameter, then zeroes gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (name, value, grad) in store.iter_mut() {
            let lr = self.lr * self.scales.get(name);
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &g), (mi, vi)) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }
}

/// Single SGD step without momentum.
pub fn sgd_step(store: &mut ParamStore, lr: f64) {
    Sgd::new(lr, 0.0).step(store);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn zero_gradients_leave_values() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![1.0, -2.0])).unwrap();
        sgd_step(&mut store, 0.5);
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn scalar_step_arithmetic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        store.accumulate("w", &Tensor::scalar(2.0)).unwrap();
        sgd_step(&mut store, 0.1);
        assert!((store.get("w").unwrap().item() - 0.8).abs() < 1e-15);
        assert_eq!(store.grad("w").unwrap().item(), 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![1.0, 1.0])).unwrap();
        store.accumulate("w", &Tensor::row(vec![5.0, -0.01])).unwrap();
        Adam::new(0.1).step(&mut store);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn scales_apply_by_prefix() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::scalar(1.0)).unwrap();
        store.insert("b.w", Tensor::scalar(1.0)).unwrap();
        store.accumulate("a.w", &Tensor::scalar(1.0)).unwrap();
        store.accumulate("b.w", &Tensor::scalar(1.0)).unwrap();
        Sgd::new(0.1, 0.0)
            .with_scales(LrScales(vec![("a.".into(), 0.5)]))
            .step(&mut store);
        assert!((store.get("a.w").unwrap().item() - 0.95).abs() < 1e-15);
        assert!((store.get("b.w").unwrap().item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w - 3)^2, optimum w* = 3.
        let target = 3.0;
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(-1.0)).unwrap();
        for _ in 0..200 {
            let mut g = Graph::new();
            let w = g.param(&store, "w").unwrap();
            let t = g.constant(Tensor::scalar(target));
            let d = g.sub(w, t).unwrap();
            let loss = g.mul(d, d).unwrap();
            g.backward(loss).unwrap().accumulate_into(&mut store).unwrap();
            sgd_step(&mut store, 0.05);
        }
        assert!((store.get("w").unwrap().item() - target).abs() < 1e-3);
    }
}
