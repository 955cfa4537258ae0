//! Linear, LSTM and BLSTMP layers built on [`Graph`] operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Affine map `y = x W + b` over the rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn num_params(&self) -> usize {
        self.input * self.output + if self.bias { self.output } else { 0 }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let bound = init_bound(self.input);
        store.insert_uniform(self.weight_name(), &[self.input, self.output], bound, rng)?;
        if self.bias {
            store.insert_uniform(self.bias_name(), &[1, self.output], bound, rng)?;
        }
        Ok(())
    }

    /// `x: [m, input] -> [m, output]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(store, &self.bias_name())?;
            g.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Standard LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    fn names(&self) -> [String; 3] {
        [
            format!("{}.wx", self.name),
            format!("{}.wh", self.name),
            format!("{}.b", self.name),
        ]
    }

    pub fn num_params(&self) -> usize {
        (self.input + self.hidden + 1) * 4 * self.hidden
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let bound = init_bound(self.input + self.hidden);
        let [wx, wh, b] = self.names();
        let h4 = 4 * self.hidden;
        store.insert_uniform(wx, &[self.input, h4], bound, rng)?;
        store.insert_uniform(wh, &[self.hidden, h4], bound, rng)?;
        store.insert_uniform(b, &[1, h4], bound, rng)?;
        Ok(())
    }

    /// Input contribution `x Wx + b` for every row of `x: [T, input]`.
    pub fn project_inputs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [wx, _, b] = self.names();
        let wx = g.param(store, &wx)?;
        let b = g.param(store, &b)?;
        let xw = g.matmul(x, wx)?;
        g.add_row(xw, b)
    }

    /// One step given `x: [1, input]` and state `(h, c)`, each `[1, hidden]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xw = self.project_inputs(g, store, x)?;
        self.step_projected(g, store, xw, h, c)
    }

    /// One step from a precomputed input contribution `xw: [1, 4*hidden]`.
    pub fn step_projected(&self, g: &mut Graph, store: &ParamStore, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let [_, wh, _] = self.names();
        let wh = g.param(store, &wh)?;
        let hw = g.matmul(h, wh)?;
        let z = g.add(xw, hw)?;
        let n = self.hidden;
        let zi = g.slice_cols(z, 0, n);
        let zf = g.slice_cols(z, n, 2 * n);
        let zg = g.slice_cols(z, 2 * n, 3 * n);
        let zo = g.slice_cols(z, 3 * n, 4 * n);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, c)?;
        let ic = g.mul(i, cand)?;
        let c_new = g.add(fc, ic)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    pub fn zero_state(&self, g: &mut Graph) -> (Var, Var) {
        let h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let c = g.constant(Tensor::zeros(&[1, self.hidden]));
        (h, c)
    }

    /// Runs the cell over every row of `x: [T, input]`, in reverse when
    /// `reverse` is set. Outputs are returned in original time order.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let steps = g.value(x).dims2().0;
        let xw = self.project_inputs(g, store, x)?;
        let (mut h, mut c) = self.zero_state(g);
        let mut outputs = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = g.row(xw, t);
            (h, c) = self.step_projected(g, store, xt, h, c)?;
            outputs[t] = h;
        }
        g.stack_rows(&outputs)
    }
}

/// One BLSTMP layer: hidden units per direction and projection width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlstmpLayer {
    pub hidden: usize,
    pub projection: usize,
}

/// Stack of bidirectional LSTM layers, each followed by a linear projection.
#[derive(Clone, Debug)]
pub struct Blstmp {
    pub name: String,
    pub input: usize,
    pub layers: Vec<BlstmpLayer>,
}

impl Blstmp {
    pub fn new(name: impl Into<String>, input: usize, layers: Vec<BlstmpLayer>) -> Self {
        Self {
            name: name.into(),
            input,
            layers,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input, |l| l.projection)
    }

    fn parts(&self) -> Vec<(LstmCell, LstmCell, Linear)> {
        let mut input = self.input;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let prefix = format!("{}.l{i}", self.name);
                let fwd = LstmCell::new(format!("{prefix}.fwd"), input, layer.hidden);
                let bwd = LstmCell::new(format!("{prefix}.bwd"), input, layer.hidden);
                let proj = Linear::new(format!("{prefix}.proj"), 2 * layer.hidden, layer.projection, true);
                input = layer.projection;
                (fwd, bwd, proj)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.parts()
            .iter()
            .map(|(f, b, p)| f.num_params() + b.num_params() + p.num_params())
            .sum()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for (fwd, bwd, proj) in self.parts() {
            fwd.init(store, rng)?;
            bwd.init(store, rng)?;
            proj.init(store, rng)?;
        }
        Ok(())
    }

    /// `features: [T, input] -> [T, output_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let (steps, width) = g.value(features).dims2();
        if steps == 0 {
            return Err(Error::EmptySequence("encoder input has no frames"));
        }
        if width != self.input {
            return Err(Error::Dimension {
                op: "Blstmp::forward",
                left: g.value(features).shape().to_vec(),
                right: vec![steps, self.input],
            });
        }
        let mut x = features;
        for (fwd, bwd, proj) in self.parts() {
            let hf = fwd.run(g, store, x, false)?;
            let hb = bwd.run(g, store, x, true)?;
            let both = g.concat_cols(&[hf, hb])?;
            x = proj.forward(g, store, both)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_and_scalar_affine() {
        let mut store = ParamStore::new();
        store
            .insert("id.weight", Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]))
            .unwrap();
        store.insert("id.bias", Tensor::zeros(&[1, 2])).unwrap();
        store.insert("s.weight", Tensor::from_vec(&[1, 1], vec![2.])).unwrap();
        store.insert("s.bias", Tensor::from_vec(&[1, 1], vec![3.])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1., 2.]));
        let y = Linear::new("id", 2, 2, true).forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2.]);
        let x = g.constant(Tensor::row(vec![4.]));
        let y = Linear::new("s", 1, 1, true).forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[11.]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut store = ParamStore::new();
        let layer = Linear::new("l", 3, 2, false);
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1., 2.]));
        let err = layer.forward(&mut g, &store, x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn lstm_zero_weights_give_zero_output() {
        let cell = LstmCell::new("c", 3, 2);
        let mut store = ParamStore::new();
        cell.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for name in ["c.wx", "c.wh", "c.b"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.3, -1.0, 2.0]));
        let (h, c) = cell.zero_state(&mut g);
        let (h2, _) = cell.step(&mut g, &store, x, h, c).unwrap();
        assert_eq!(g.value(h2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_hand_set_gates_match_closed_form() {
        // One unit: i = 1, f = 0, o = 1 (saturated), cell input tanh(w x).
        let cell = LstmCell::new("c", 1, 1);
        let mut store = ParamStore::new();
        let big = 1e3;
        let w = 0.7;
        store
            .insert("c.wx", Tensor::from_vec(&[1, 4], vec![0., 0., w, 0.]))
            .unwrap();
        store.insert("c.wh", Tensor::zeros(&[1, 4])).unwrap();
        store
            .insert("c.b", Tensor::from_vec(&[1, 4], vec![big, -big, 0., big]))
            .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.9]));
        let h0 = g.constant(Tensor::row(vec![0.2]));
        let c0 = g.constant(Tensor::row(vec![5.0]));
        let (h, c) = cell.step(&mut g, &store, x, h0, c0).unwrap();
        let expected_c = (w * 0.9f64).tanh();
        assert!((g.value(c).item() - expected_c).abs() < 1e-12);
        assert!((g.value(h).item() - expected_c.tanh()).abs() < 1e-12);
    }

    #[test]
    fn blstmp_shapes_and_empty_input() {
        let enc = Blstmp::new(
            "enc",
            4,
            vec![
                BlstmpLayer {
                    hidden: 3,
                    projection: 5,
                },
                BlstmpLayer {
                    hidden: 2,
                    projection: 6,
                },
            ],
        );
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(store.num_scalars(), enc.num_params());
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4], 0.5));
        let h = enc.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 6]);
        let empty = g.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(
            enc.forward(&mut g, &store, empty),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn blstmp_zero_weights_give_zero_states() {
        let enc = Blstmp::new(
            "enc",
            3,
            vec![BlstmpLayer {
                hidden: 2,
                projection: 4,
            }],
        );
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[5, 3], 1.0));
        let h = enc.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(h).shape(), &[5, 4]);
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }
}
