//! Location-aware attention decoder.
//!
//! At step `l` the score of encoder state `h_t` is
//! `g . tanh(W_q q_{l-1} + W_h h_t + W_f (K * a_{l-1})_t)`, normalized over
//! `t` by a softmax. The context `c_l = sum_t a_{l,t} h_t` and the embedding
//! of the previous token feed a stack of LSTM cells whose top state is mapped
//! to `p_att(y_l)`.
//!
//! Symbol 0 doubles as start-of-sequence (input) and end-of-sequence
//! (output); symbols `1..=V` are tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, LstmCell, ParamStore, Tensor, Var};

pub const SOS: usize = 0;
pub const EOS: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub att_dim: usize,
    pub loc_kernel: usize,
    pub loc_channels: usize,
    pub sharpness: f64,
    /// Bias terms inside the score's linear maps.
    pub bias: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            att_dim: 64,
            loc_kernel: 15,
            loc_channels: 8,
            sharpness: 1.0,
            bias: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            layers: 1,
        }
    }
}

/// `x (x) K` along time with zero "same" padding:
/// `a: [1, T]`, `kernel: [C, k] -> [T, C]`.
pub fn location_conv(g: &mut Graph, a: Var, kernel: Var) -> Result<Var> {
    let t_len = g.value(a).len();
    let (c_len, k_len) = g.value(kernel).dims2();
    if k_len % 2 == 0 {
        return Err(Error::Config(format!("location kernel width must be odd, got {k_len}")));
    }
    let half = (k_len / 2) as isize;
    let src = move |t: usize, j: usize| -> Option<usize> {
        let idx = t as isize + j as isize - half;
        (0..t_len as isize).contains(&idx).then_some(idx as usize)
    };
    let mut out = vec![0.0; t_len * c_len];
    {
        let av = g.value(a).data();
        let kv = g.value(kernel).data();
        for t in 0..t_len {
            for c in 0..c_len {
                out[t * c_len + c] = (0..k_len)
                    .filter_map(|j| src(t, j).map(|i| av[i] * kv[c * k_len + j]))
                    .sum();
            }
        }
    }
    let a_shape = g.value(a).shape().to_vec();
    Ok(
        g.custom(&[a, kernel], Tensor::from_vec(&[t_len, c_len], out), move |args| {
            let av = args.inputs[0].data();
            let kv = args.inputs[1].data();
            let gr = args.grad.data();
            let mut da = vec![0.0; t_len];
            let mut dk = vec![0.0; c_len * k_len];
            for t in 0..t_len {
                for c in 0..c_len {
                    let gv = gr[t * c_len + c];
                    for j in 0..k_len {
                        if let Some(i) = src(t, j) {
                            da[i] += gv * kv[c * k_len + j];
                            dk[c * k_len + j] += gv * av[i];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(&a_shape, da)),
                Some(Tensor::from_vec(&[c_len, k_len], dk)),
            ]
        }),
    )
}

/// Encoder states with their attention projection precomputed.
#[derive(Clone, Copy, Debug)]
pub struct EncodedInput {
    /// `[T, d_enc]`.
    pub states: Var,
    /// `W_h h_t` for every `t`, `[T, att_dim]`.
    pub projected: Var,
}

/// Decoder state as graph nodes.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    /// `(h, c)` per stacked cell, each `[1, hidden]`.
    pub layers: Vec<(Var, Var)>,
    /// Previous attention distribution, `[1, T]`.
    pub attention: Var,
}

/// Decoder state as plain values, used by beam search.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<(Tensor, Tensor)>,
    pub attention: Tensor,
    pub prev_token: usize,
}

/// Output of one decoder step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `log p_att` over `V+1` symbols, `[1, V+1]`.
    pub log_probs: Var,
    /// `a_l`, `[1, T]`.
    pub attention: Var,
    pub state: DecoderVars,
}

#[derive(Clone, Debug)]
pub struct AttentionDecoder {
    pub att: AttentionConfig,
    pub dec: DecoderConfig,
    pub enc_dim: usize,
    /// Output symbols including end-of-sequence (`V+1`).
    pub num_symbols: usize,
}

impl AttentionDecoder {
    pub fn new(att: AttentionConfig, dec: DecoderConfig, enc_dim: usize, num_symbols: usize) -> Self {
        Self {
            att,
            dec,
            enc_dim,
            num_symbols,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.att.loc_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention.loc_kernel must be odd, got {}",
                self.att.loc_kernel
            )));
        }
        if self.dec.layers == 0 || self.dec.hidden == 0 || self.att.att_dim == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        Ok(())
    }

    fn query(&self) -> Linear {
        Linear::new("att.wq", self.dec.hidden, self.att.att_dim, self.att.bias)
    }

    fn key(&self) -> Linear {
        Linear::new("att.wh", self.enc_dim, self.att.att_dim, false)
    }

    fn location(&self) -> Linear {
        Linear::new("att.wf", self.att.loc_channels, self.att.att_dim, false)
    }

    fn cells(&self) -> Vec<LstmCell> {
        (0..self.dec.layers)
            .map(|i| {
                let input = if i == 0 {
                    self.enc_dim + self.dec.embed_dim
                } else {
                    self.dec.hidden
                };
                LstmCell::new(format!("dec.lstm{i}"), input, self.dec.hidden)
            })
            .collect()
    }

    fn output(&self) -> Linear {
        Linear::new("dec.out", self.dec.hidden, self.num_symbols, true)
    }

    pub fn num_params(&self) -> usize {
        self.query().num_params()
            + self.key().num_params()
            + self.location().num_params()
            + self.att.att_dim
            + self.att.loc_channels * self.att.loc_kernel
            + self.num_symbols * self.dec.embed_dim
            + self.cells().iter().map(LstmCell::num_params).sum::<usize>()
            + self.output().num_params()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.query().init(store, rng)?;
        self.key().init(store, rng)?;
        self.location().init(store, rng)?;
        let bound = 1.0 / (self.att.att_dim as f64).sqrt();
        store.insert_uniform("att.g", &[self.att.att_dim, 1], bound, rng)?;
        let bound = 1.0 / (self.att.loc_kernel as f64).sqrt();
        store.insert_uniform("att.K", &[self.att.loc_channels, self.att.loc_kernel], bound, rng)?;
        store.insert_uniform("dec.embed", &[self.num_symbols, self.dec.embed_dim], 1.0, rng)?;
        for cell in self.cells() {
            cell.init(store, rng)?;
        }
        self.output().init(store, rng)
    }

    /// Precomputes `W_h H` for `states: [T, d_enc]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, states: Var) -> Result<EncodedInput> {
        let projected = self.key().forward(g, store, states)?;
        Ok(EncodedInput { states, projected })
    }

    /// Zero recurrent state and uniform attention over `T` frames.
    pub fn initial_vars(&self, g: &mut Graph, frames: usize) -> DecoderVars {
        let layers = (0..self.dec.layers)
            .map(|_| {
                (
                    g.constant(Tensor::zeros(&[1, self.dec.hidden])),
                    g.constant(Tensor::zeros(&[1, self.dec.hidden])),
                )
            })
            .collect();
        let attention = g.constant(Tensor::full(&[1, frames], 1.0 / frames as f64));
        DecoderVars { layers, attention }
    }

    pub fn initial_state(&self, frames: usize) -> DecoderState {
        DecoderState {
            layers: (0..self.dec.layers)
                .map(|_| {
                    (
                        Tensor::zeros(&[1, self.dec.hidden]),
                        Tensor::zeros(&[1, self.dec.hidden]),
                    )
                })
                .collect(),
            attention: Tensor::full(&[1, frames], 1.0 / frames as f64),
            prev_token: SOS,
        }
    }

    /// Attention weights `a_l: [1, T]` and context `c_l: [1, d_enc]`.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedInput,
        query: Var,
        prev_attention: Var,
    ) -> Result<(Var, Var)> {
        let kernel = g.param(store, "att.K")?;
        let loc = location_conv(g, prev_attention, kernel)?;
        let loc = self.location().forward(g, store, loc)?;
        let q = self.query().forward(g, store, query)?;
        let sum = g.add(enc.projected, loc)?;
        let sum = g.add_row(sum, q)?;
        let e = g.tanh(sum);
        let proj = g.param(store, "att.g")?;
        let scores = g.matmul(e, proj)?;
        let scores = if self.att.sharpness != 1.0 {
            g.scale(scores, self.att.sharpness)
        } else {
            scores
        };
        let scores = g.transpose(scores);
        let weights = g.softmax(scores);
        let context = g.matmul(weights, enc.states)?;
        Ok((weights, context))
    }

    /// Recurrence `q_l = LSTM([c_l, emb(y_{l-1})], q_{l-1})` and
    /// `log p_att = log_softmax(W q_l + b)`.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layers: &[(Var, Var)],
        context: Var,
        prev_token: usize,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        if prev_token >= self.num_symbols {
            return Err(Error::Domain(format!(
                "token {prev_token} outside decoder vocabulary of {} symbols",
                self.num_symbols
            )));
        }
        let table = g.param(store, "dec.embed")?;
        let emb = g.row(table, prev_token);
        let mut x = g.concat_cols(&[context, emb])?;
        let mut next = Vec::with_capacity(layers.len());
        for (cell, &(h, c)) in self.cells().iter().zip(layers) {
            let (h2, c2) = cell.step(g, store, x, h, c)?;
            next.push((h2, c2));
            x = h2;
        }
        let logits = self.output().forward(g, store, x)?;
        Ok((g.log_softmax(logits), next))
    }

    /// Attention followed by one decoder step.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedInput,
        state: &DecoderVars,
        prev_token: usize,
    ) -> Result<StepOutput> {
        let query = state.layers.last().expect("at least one decoder layer").0;
        let (attention, context) = self.attend(g, store, enc, query, state.attention)?;
        let (log_probs, layers) = self.decoder_step(g, store, &state.layers, context, prev_token)?;
        Ok(StepOutput {
            log_probs,
            attention,
            state: DecoderVars { layers, attention },
        })
    }

    /// Teacher-forced `-log p_att(Y | H)` including the end-of-sequence term.
    /// Returns the loss node and the attention matrix `[L+1, T]`.
    pub fn teacher_forced_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: Var,
        target: &[usize],
    ) -> Result<(Var, Var)> {
        if target.is_empty() {
            return Err(Error::Domain("attention target must be nonempty".into()));
        }
        let frames = g.value(states).dims2().0;
        let enc = self.encode(g, store, states)?;
        let mut state = self.initial_vars(g, frames);
        let mut inputs = vec![SOS];
        inputs.extend_from_slice(target);
        let mut outputs = target.to_vec();
        outputs.push(EOS);
        let mut rows = Vec::with_capacity(inputs.len());
        let mut attn = Vec::with_capacity(inputs.len());
        for &prev in &inputs {
            let out = self.step(g, store, &enc, &state, prev)?;
            rows.push(out.log_probs);
            attn.push(out.attention);
            state = out.state;
        }
        let logp = g.stack_rows(&rows)?;
        let loss = g.nll(logp, &outputs)?;
        let attention = g.stack_rows(&attn)?;
        Ok((loss, attention))
    }

    /// Value-level step for search: `log p_att` over `V+1` symbols, the new
    /// state (with `prev_token` set to `token`) and the attention weights.
    pub fn step_values(
        &self,
        store: &ParamStore,
        states: &Tensor,
        projected: &Tensor,
        state: &DecoderState,
    ) -> Result<(Vec<f64>, DecoderState)> {
        let mut g = Graph::new();
        let enc = EncodedInput {
            states: g.constant(states.clone()),
            projected: g.constant(projected.clone()),
        };
        let vars = DecoderVars {
            layers: state
                .layers
                .iter()
                .map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone())))
                .collect(),
            attention: g.constant(state.attention.clone()),
        };
        let out = self.step(&mut g, store, &enc, &vars, state.prev_token)?;
        let next = DecoderState {
            layers: out
                .state
                .layers
                .iter()
                .map(|(h, c)| (g.value(*h).clone(), g.value(*c).clone()))
                .collect(),
            attention: g.value(out.attention).clone(),
            prev_token: state.prev_token,
        };
        Ok((g.value(out.log_probs).data().to_vec(), next))
    }

    /// `W_h H` as a plain value.
    pub fn project_values(&self, store: &ParamStore, states: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = g.constant(states.clone());
        let enc = self.encode(&mut g, store, h)?;
        Ok(g.value(enc.projected).clone())
    }
}

/// `(1 - lambda) * att + lambda * ctc`.
pub fn joint_loss(att: f64, ctc: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * att + lambda * ctc)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Graph form of [`joint_loss`].
pub fn joint_loss_op(g: &mut Graph, att: Var, ctc: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = g.scale(att, 1.0 - lambda);
    let c = g.scale(ctc, lambda);
    g.add(a, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder(symbols: usize) -> (AttentionDecoder, ParamStore) {
        let d = AttentionDecoder::new(
            AttentionConfig {
                att_dim: 6,
                loc_kernel: 3,
                loc_channels: 2,
                ..Default::default()
            },
            DecoderConfig {
                embed_dim: 3,
                hidden: 5,
                layers: 1,
            },
            4,
            symbols,
        );
        let mut store = ParamStore::new();
        d.init(&mut store, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        (d, store)
    }

    fn zero_all(store: &mut ParamStore) {
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let s = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Tensor::zeros(&s)).unwrap();
        }
    }

    #[test]
    fn single_frame_attention_is_trivial() {
        let (d, store) = decoder(4);
        let mut g = Graph::new();
        let h = g.constant(Tensor::row(vec![0.3, -0.1, 2.0, 0.5]));
        let enc = d.encode(&mut g, &store, h).unwrap();
        let st = d.initial_vars(&mut g, 1);
        let (a, c) = d.attend(&mut g, &store, &enc, st.layers[0].0, st.attention).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        assert_eq!(g.value(c).data(), g.value(h).data());
    }

    #[test]
    fn zero_parameters_give_uniform_attention_and_output() {
        let (d, mut store) = decoder(4);
        zero_all(&mut store);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_vec(&[3, 4], (0..12).map(|v| v as f64).collect()));
        let (loss, attn) = d.teacher_forced_loss(&mut g, &store, h, &[1, 2]).unwrap();
        assert!((g.value(loss).item() - 3.0 * 4f64.ln()).abs() < 1e-12);
        for v in g.value(attn).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn value_step_is_deterministic() {
        let (d, store) = decoder(5);
        let states = Tensor::from_vec(&[3, 4], (0..12).map(|v| (v as f64 * 0.37).sin()).collect());
        let proj = d.project_values(&store, &states).unwrap();
        let init = d.initial_state(3);
        let (p1, s1) = d.step_values(&store, &states, &proj, &init).unwrap();
        let (p2, s2) = d.step_values(&store, &states, &proj, &init).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
        let total: f64 = p1.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let bad = DecoderState { prev_token: 5, ..init };
        assert!(matches!(
            d.step_values(&store, &states, &proj, &bad),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn joint_loss_cases() {
        assert_eq!(joint_loss(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert_eq!(joint_loss(2.0, 4.0, 1.0).unwrap(), 4.0);
        assert_eq!(joint_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!(joint_loss(2.0, 4.0, 1.5).is_err());
        assert!(joint_loss(2.0, 4.0, -0.1).is_err());
    }
}
