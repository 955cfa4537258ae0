//! Depthwise-convolution blocks stacked on the Sinc layer, and the complete
//! per-frame feature extractor.
//!
//! All convolutions run strictly inside one frame; there is no context across
//! frames. A depthwise block with `c_in` input channels and multiplier `n`
//! holds `c_out * k` weights (`c_out = n * c_in`) instead of the
//! `c_in * c_out * k` of a full convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FrameMatrix;
use crate::error::{Error, Result};
use crate::nn::{dot, Graph, ParamStore, Tensor, Var};
use crate::sinc::{Activation, SincBlock, SincConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    None,
    /// Average over the remaining within-frame axis.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DConvBlockConfig {
    pub in_channels: usize,
    pub multiplier: usize,
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub bias: bool,
}

fn one() -> usize {
    1
}

impl DConvBlockConfig {
    pub fn out_channels(&self) -> usize {
        self.multiplier * self.in_channels
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len - self.kernel_size) / self.stride + 1
    }

    /// Depthwise parameter count: `c_out * k` (+ `c_out` with bias).
    pub fn param_count(&self) -> usize {
        self.out_channels() * self.kernel_size + if self.bias { self.out_channels() } else { 0 }
    }

    /// Weights a full convolution of the same shape would need: `c_in * c_out * k`.
    pub fn param_count_full(&self) -> usize {
        self.in_channels * self.out_channels() * self.kernel_size
    }

    /// Weights of the pointwise (1x1) stage this block omits: `c_in * c_out`.
    pub fn param_count_pointwise(&self) -> usize {
        self.in_channels * self.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.multiplier == 0 {
            return Err(Error::Config("dconv channels and multiplier must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "dconv kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("dconv stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sinc layer plus the depthwise stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontEndConfig {
    pub sinc: SincConfig,
    pub blocks: Vec<DConvBlockConfig>,
    pub output_dim: usize,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        let block = |in_channels, multiplier, kernel_size, stride, pooling| DConvBlockConfig {
            in_channels,
            multiplier,
            kernel_size,
            stride,
            pooling,
            activation: Activation::Logc,
            bias: false,
        };
        Self {
            sinc: SincConfig::default(),
            blocks: vec![
                block(128, 2, 25, 2, Pooling::None),
                block(256, 1, 9, 1, Pooling::None),
                block(256, 1, 7, 1, Pooling::None),
                block(256, 1, 9, 1, Pooling::None),
                block(256, 1, 3, 1, Pooling::Average),
            ],
            output_dim: 256,
        }
    }
}

impl FrontEndConfig {
    /// Sets the nonlinearity of the Sinc layer and every block.
    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.sinc.activation = activation;
        for b in &mut self.blocks {
            b.activation = activation;
        }
        self
    }

    /// Checks the channel chain and within-frame lengths for frames of
    /// `frame_len` samples.
    pub fn validate(&self, sample_rate: u32, frame_len: usize) -> Result<()> {
        self.sinc.validate(sample_rate, frame_len)?;
        let mut channels = self.sinc.num_filters;
        let mut len = self.sinc.output_len(frame_len);
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_channels != channels {
                return Err(Error::Config(format!(
                    "dconv block {i} expects {} input channels, previous layer yields {channels}",
                    b.in_channels
                )));
            }
            if len < b.kernel_size {
                return Err(Error::Config(format!(
                    "dconv block {i}: within-frame length {len} is shorter than kernel {}",
                    b.kernel_size
                )));
            }
            let last = i + 1 == self.blocks.len();
            if (b.pooling == Pooling::Average) != last {
                return Err(Error::Config(format!(
                    "dconv block {i}: average pooling must be set on the final block only"
                )));
            }
            channels = b.out_channels();
            len = b.output_len(len);
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("front-end needs at least one dconv block".into()));
        }
        if channels != self.output_dim {
            return Err(Error::Config(format!(
                "front-end output has {channels} channels, output_dim declares {}",
                self.output_dim
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.sinc.num_params() + self.blocks.iter().map(DConvBlockConfig::param_count).sum::<usize>()
    }

    pub fn pointwise_saving(&self) -> usize {
        self.blocks.iter().map(DConvBlockConfig::param_count_pointwise).sum()
    }
}

pub fn block_weight_name(i: usize) -> String {
    format!("frontend.dconv{i}.weight")
}

pub fn block_bias_name(i: usize) -> String {
    format!("frontend.dconv{i}.bias")
}

/// Depthwise strided valid convolution within frames.
///
/// `x: [T, C, P]`, `weight: [n*C, k]`, optional `bias: [n*C]`, output
/// `[T, n*C, floor((P - k) / stride) + 1]`. Output channel `m*C + c` reads
/// only input channel `c`.
pub fn dconv(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
    let (t_len, c_len, p_len) = g.value(x).dims3();
    let (o_len, k_len) = g.value(weight).dims2();
    if o_len % c_len != 0 || c_len == 0 {
        return Err(Error::Dimension {
            op: "dconv",
            left: g.value(x).shape().to_vec(),
            right: g.value(weight).shape().to_vec(),
        });
    }
    if p_len < k_len || stride == 0 {
        return Err(Error::Config(format!(
            "dconv: within-frame length {p_len} is shorter than kernel {k_len}"
        )));
    }
    if let Some(b) = bias {
        if g.value(b).shape() != [o_len] {
            return Err(Error::Dimension {
                op: "dconv bias",
                left: vec![o_len],
                right: g.value(b).shape().to_vec(),
            });
        }
    }
    let q_len = (p_len - k_len) / stride + 1;
    let mut out = vec![0.0; t_len * o_len * q_len];
    {
        let xv = g.value(x).data();
        let wv = g.value(weight).data();
        let bv = bias.map(|b| g.value(b).data());
        for t in 0..t_len {
            for o in 0..o_len {
                let c = o % c_len;
                let src = &xv[(t * c_len + c) * p_len..(t * c_len + c + 1) * p_len];
                let kern = &wv[o * k_len..(o + 1) * k_len];
                let b0 = bv.map_or(0.0, |b| b[o]);
                let dst = &mut out[(t * o_len + o) * q_len..(t * o_len + o + 1) * q_len];
                for (q, d) in dst.iter_mut().enumerate() {
                    *d = b0 + dot(&src[q * stride..q * stride + k_len], kern);
                }
            }
        }
    }
    let value = Tensor::from_vec(&[t_len, o_len, q_len], out);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    Ok(g.custom(&parents, value, move |a| {
        let xv = a.inputs[0].data();
        let wv = a.inputs[1].data();
        let gr = a.grad.data();
        let mut dx = a.needs[0].then(|| vec![0.0; t_len * c_len * p_len]);
        let mut dw = a.needs[1].then(|| vec![0.0; o_len * k_len]);
        let mut db = (a.inputs.len() > 2 && a.needs[2]).then(|| vec![0.0; o_len]);
        for t in 0..t_len {
            for o in 0..o_len {
                let c = o % c_len;
                let base = (t * c_len + c) * p_len;
                let gslice = &gr[(t * o_len + o) * q_len..(t * o_len + o + 1) * q_len];
                if let Some(db) = db.as_mut() {
                    db[o] += gslice.iter().sum::<f64>();
                }
                for (q, &gv) in gslice.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let off = base + q * stride;
                    if let Some(dw) = dw.as_mut() {
                        for (d, &xv) in dw[o * k_len..(o + 1) * k_len].iter_mut().zip(&xv[off..off + k_len]) {
                            *d += gv * xv;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        for (d, &kv) in dx[off..off + k_len].iter_mut().zip(&wv[o * k_len..(o + 1) * k_len]) {
                            *d += gv * kv;
                        }
                    }
                }
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::from_vec(&[t_len, c_len, p_len], d)),
            dw.map(|d| Tensor::from_vec(&[o_len, k_len], d)),
        ];
        if a.inputs.len() > 2 {
            grads.push(db.map(|d| Tensor::from_vec(&[o_len], d)));
        }
        grads
    }))
}

/// Mean over the last axis: `[T, C, P] -> [T, C]`.
pub fn average_pool(g: &mut Graph, x: Var) -> Var {
    let (t_len, c_len, p_len) = g.value(x).dims3();
    let scale = 1.0 / p_len as f64;
    let data = g
        .value(x)
        .data()
        .chunks(p_len)
        .map(|c| c.iter().sum::<f64>() * scale)
        .collect();
    g.custom(&[x], Tensor::from_vec(&[t_len, c_len], data), move |a| {
        let d = a
            .grad
            .data()
            .iter()
            .flat_map(|&gv| std::iter::repeat_n(gv * scale, p_len))
            .collect();
        vec![Some(Tensor::from_vec(&[t_len, c_len, p_len], d))]
    })
}

/// Front-end output `r_1..r_T`, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `[T, C]`.
    pub values: Tensor,
    pub frame_len: usize,
    pub hop: usize,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// One row of the parameter accounting table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub formula: String,
    /// Full-convolution count for the same layer, where applicable.
    pub full_count: Option<usize>,
    /// Pointwise stage that would be added on top, where applicable.
    pub pointwise_count: Option<usize>,
}

/// Learnable Sinc layer followed by depthwise blocks.
#[derive(Clone, Debug)]
pub struct FrontEnd {
    pub cfg: FrontEndConfig,
    pub sample_rate: u32,
}

impl FrontEnd {
    pub fn new(cfg: FrontEndConfig, sample_rate: u32) -> Self {
        Self { cfg, sample_rate }
    }

    pub fn sinc_block(&self) -> SincBlock {
        SincBlock::new(self.cfg.sinc.clone(), self.sample_rate)
    }

    /// Mel-initialized Sinc filters and uniformly initialized kernels.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.sinc_block().init(store)?;
        for (i, b) in self.cfg.blocks.iter().enumerate() {
            let bound = 1.0 / (b.kernel_size as f64).sqrt();
            store.insert_uniform(block_weight_name(i), &[b.out_channels(), b.kernel_size], bound, rng)?;
            if b.bias {
                store.insert_uniform(block_bias_name(i), &[b.out_channels()], bound, rng)?;
            }
        }
        Ok(())
    }

    /// `frames: [T, S] -> [T, output_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var> {
        let mut x = self.sinc_block().forward(g, store, frames)?;
        for (i, b) in self.cfg.blocks.iter().enumerate() {
            let w = g.param(store, &block_weight_name(i))?;
            let bias = if b.bias {
                Some(g.param(store, &block_bias_name(i))?)
            } else {
                None
            };
            let y = dconv(g, x, w, bias, b.stride)?;
            x = b.activation.apply(g, y);
            if b.pooling == Pooling::Average {
                x = average_pool(g, x);
            }
        }
        Ok(x)
    }

    /// Inference-only feature extraction.
    pub fn extract(&self, store: &ParamStore, frames: &FrameMatrix) -> Result<FeatureSequence> {
        self.cfg.validate(self.sample_rate, frames.frame_len)?;
        if frames.num_frames() == 0 {
            return Ok(FeatureSequence {
                values: Tensor::zeros(&[0, self.cfg.output_dim]),
                frame_len: frames.frame_len,
                hop: frames.hop,
            });
        }
        let mut g = Graph::new();
        let x = g.constant(frames.frames.clone());
        let y = self.forward(&mut g, store, x)?;
        Ok(FeatureSequence {
            values: g.value(y).clone(),
            frame_len: frames.frame_len,
            hop: frames.hop,
        })
    }

    /// Per-layer parameter accounting.
    pub fn param_table(&self) -> Vec<LayerCount> {
        let mut rows = vec![LayerCount {
            name: "sinc".into(),
            shape: vec![2, self.cfg.sinc.num_filters],
            count: self.cfg.sinc.num_params(),
            formula: format!("2 * num_filters = 2 * {}", self.cfg.sinc.num_filters),
            full_count: None,
            pointwise_count: None,
        }];
        for (i, b) in self.cfg.blocks.iter().enumerate() {
            let mut formula = format!("c_out * k = {} * {}", b.out_channels(), b.kernel_size);
            if b.bias {
                formula.push_str(&format!(" + {}", b.out_channels()));
            }
            rows.push(LayerCount {
                name: format!("dconv{i}"),
                shape: vec![b.out_channels(), b.kernel_size],
                count: b.param_count(),
                formula,
                full_count: Some(b.param_count_full()),
                pointwise_count: Some(b.param_count_pointwise()),
            });
        }
        rows
    }
}
