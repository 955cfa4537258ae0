//! Parametrized Sinc-convolution layer.
//!
//! Each filter is a windowed band-pass kernel
//! `g[n] = 2 f2 sinc(2 pi f2 n) - 2 f1 sinc(2 pi f1 n)` whose cutoffs are
//! derived from two learnable reals: `f1 = |w1|`, `f2 = |w1| + |w2 - w1|`.
//! Frequencies are normalized (cycles per sample, Nyquist = 0.5) and clamped
//! from below by `min_low` / `min_band` and from above by Nyquist.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dot, Graph, ParamStore, Tensor, Var};

pub const W1_PARAM: &str = "frontend.sinc.w1";
pub const W2_PARAM: &str = "frontend.sinc.w2";
const NYQUIST: f64 = 0.5;

/// Elementwise nonlinearity used in the front-end.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Logc,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Logc => g.logc(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Hyperparameters of the Sinc layer. Frequencies here are in Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SincConfig {
    pub num_filters: usize,
    pub kernel_len: usize,
    pub stride: usize,
    pub min_low_hz: f64,
    pub min_band_hz: f64,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub activation: Activation,
}

impl Default for SincConfig {
    fn default() -> Self {
        Self {
            num_filters: 128,
            kernel_len: 101,
            stride: 4,
            min_low_hz: 50.0,
            min_band_hz: 50.0,
            f_min_hz: 30.0,
            f_max_hz: 8000.0,
            activation: Activation::Logc,
        }
    }
}

impl SincConfig {
    pub fn validate(&self, sample_rate: u32, frame_len: usize) -> Result<()> {
        if self.num_filters == 0 {
            return Err(Error::Config("sinc.num_filters must be positive".into()));
        }
        if self.kernel_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sinc.kernel_len must be odd, got {}",
                self.kernel_len
            )));
        }
        if self.kernel_len > frame_len {
            return Err(Error::Config(format!(
                "sinc.kernel_len {} exceeds frame length {frame_len} samples",
                self.kernel_len
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("sinc.stride must be at least 1".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz && self.f_max_hz <= nyquist) {
            return Err(Error::Config(format!(
                "sinc mel range must satisfy 0 <= f_min < f_max <= {nyquist} Hz (got {}..{})",
                self.f_min_hz, self.f_max_hz
            )));
        }
        if !(self.min_low_hz > 0.0 && self.min_band_hz >= 0.0 && self.min_low_hz + self.min_band_hz <= nyquist) {
            return Err(Error::Config(
                "sinc floors must satisfy min_low > 0, min_band >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Output positions per frame: `floor((S - L) / stride) + 1`.
    pub fn output_len(&self, frame_len: usize) -> usize {
        (frame_len - self.kernel_len) / self.stride + 1
    }

    pub fn num_params(&self) -> usize {
        2 * self.num_filters
    }
}

/// Derived cutoffs and their partial derivatives w.r.t. the raw parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoffs {
    pub f1: f64,
    pub f2: f64,
    pub df1_dw1: f64,
    pub df2_dw1: f64,
    pub df2_dw2: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `f1 = max(|w1|, min_low)`, `f2 = min(f1 + max(|w2 - w1|, min_band), 0.5)`.
///
/// Gradients flow only through branches that are not clamped.
pub fn cutoffs(w1: f64, w2: f64, min_low: f64, min_band: f64) -> Cutoffs {
    let (f1, df1_dw1) = if w1.abs() > min_low {
        (w1.abs(), sign(w1))
    } else {
        (min_low, 0.0)
    };
    let diff = w2 - w1;
    let (band, dband_dw2) = if diff.abs() > min_band {
        (diff.abs(), sign(diff))
    } else {
        (min_band, 0.0)
    };
    let upper = f1 + band;
    if upper < NYQUIST {
        Cutoffs {
            f1,
            f2: upper,
            df1_dw1,
            df2_dw1: df1_dw1 - dband_dw2,
            df2_dw2: dband_dw2,
        }
    } else {
        Cutoffs {
            f1: f1.min(NYQUIST),
            f2: NYQUIST,
            df1_dw1: if f1 < NYQUIST { df1_dw1 } else { 0.0 },
            df2_dw1: 0.0,
            df2_dw2: 0.0,
        }
    }
}

/// Convenience form returning only `(f1, f2)`.
pub fn cutoffs_from_params(w1: f64, w2: f64, min_low: f64, min_band: f64) -> (f64, f64) {
    let c = cutoffs(w1, w2, min_low, min_band);
    (c.f1, c.f2)
}

/// `sin(x) / x` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Hamming window `0.54 - 0.46 cos(2 pi n / L)` for `n = 0..L`.
pub fn hamming_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

fn tap_offset(j: usize, len: usize) -> f64 {
    j as f64 - ((len - 1) / 2) as f64
}

fn check_kernel_domain(f1: f64, f2: f64, len: usize) -> Result<()> {
    if len.is_multiple_of(2) || len == 0 {
        return Err(Error::Domain(format!("kernel length must be odd, got {len}")));
    }
    if !(f1 > 0.0 && f1 <= f2 && f2 <= NYQUIST) {
        return Err(Error::Domain(format!(
            "cutoffs must satisfy 0 < f1 <= f2 <= 0.5 (got f1={f1}, f2={f2})"
        )));
    }
    Ok(())
}

/// Band-pass kernel before windowing, taps `n = -(L-1)/2 ..= (L-1)/2`.
pub fn raw_kernel(f1: f64, f2: f64, len: usize) -> Result<Vec<f64>> {
    check_kernel_domain(f1, f2, len)?;
    Ok((0..len)
        .map(|j| {
            let n = tap_offset(j, len);
            2.0 * f2 * sinc(2.0 * PI * f2 * n) - 2.0 * f1 * sinc(2.0 * PI * f1 * n)
        })
        .collect())
}

/// Hamming-windowed band-pass kernel of odd length `len`.
pub fn build_kernel(f1: f64, f2: f64, len: usize) -> Result<Vec<f64>> {
    let raw = raw_kernel(f1, f2, len)?;
    Ok(raw.iter().zip(hamming_window(len)).map(|(k, w)| k * w).collect())
}

/// Learnable filter bank in normalized frequency units.
#[derive(Clone, Debug, PartialEq)]
pub struct SincFilterBank {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub kernel_len: usize,
    pub min_low: f64,
    pub min_band: f64,
}

impl SincFilterBank {
    /// Bank initialized on the mel scale per `cfg`.
    pub fn mel(cfg: &SincConfig, sample_rate: u32) -> Result<Self> {
        let (w1, w2) = mel_initialize(cfg.num_filters, cfg.f_min_hz, cfg.f_max_hz, sample_rate)?;
        let rate = sample_rate as f64;
        Ok(Self {
            w1,
            w2,
            kernel_len: cfg.kernel_len,
            min_low: cfg.min_low_hz / rate,
            min_band: cfg.min_band_hz / rate,
        })
    }

    pub fn from_store(store: &ParamStore, cfg: &SincConfig, sample_rate: u32) -> Result<Self> {
        let rate = sample_rate as f64;
        let w1 = store.get(W1_PARAM)?.data().to_vec();
        let w2 = store.get(W2_PARAM)?.data().to_vec();
        if w1.len() != cfg.num_filters || w2.len() != cfg.num_filters {
            return Err(Error::Checkpoint(format!(
                "sinc parameters hold {}/{} filters, config expects {}",
                w1.len(),
                w2.len(),
                cfg.num_filters
            )));
        }
        Ok(Self {
            w1,
            w2,
            kernel_len: cfg.kernel_len,
            min_low: cfg.min_low_hz / rate,
            min_band: cfg.min_band_hz / rate,
        })
    }

    pub fn insert_into(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(W1_PARAM, Tensor::from_vec(&[self.len()], self.w1.clone()))?;
        store.insert(W2_PARAM, Tensor::from_vec(&[self.len()], self.w2.clone()))
    }

    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }

    pub fn cutoffs(&self) -> Vec<(f64, f64)> {
        self.w1
            .iter()
            .zip(&self.w2)
            .map(|(&a, &b)| cutoffs_from_params(a, b, self.min_low, self.min_band))
            .collect()
    }

    /// Windowed kernels, `[num_filters, kernel_len]`.
    pub fn kernels(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.len() * self.kernel_len);
        for (f1, f2) in self.cutoffs() {
            data.extend(build_kernel(f1, f2, self.kernel_len)?);
        }
        Ok(Tensor::from_vec(&[self.len(), self.kernel_len], data))
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Raw parameters `(w1, w2)` placing filter `i` between the `i`-th and
/// `(i+1)`-th of `num_filters + 1` mel-spaced points in `[f_min, f_max]`.
pub fn mel_initialize(
    num_filters: usize,
    f_min_hz: f64,
    f_max_hz: f64,
    sample_rate: u32,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rate = sample_rate as f64;
    if num_filters == 0 || !(f_min_hz >= 0.0 && f_min_hz < f_max_hz && f_max_hz <= rate / 2.0) {
        return Err(Error::Domain(format!(
            "mel init needs 0 <= f_min < f_max <= {} Hz and at least one filter",
            rate / 2.0
        )));
    }
    let (lo, hi) = (hz_to_mel(f_min_hz), hz_to_mel(f_max_hz));
    let points: Vec<f64> = (0..=num_filters)
        .map(|i| {
            if i == num_filters {
                f_max_hz / rate
            } else {
                mel_to_hz(lo + (hi - lo) * i as f64 / num_filters as f64) / rate
            }
        })
        .collect();
    Ok((points[..num_filters].to_vec(), points[1..].to_vec()))
}

/// One row of [`inspect_filters`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterInfo {
    pub index: usize,
    pub f1_hz: f64,
    pub f2_hz: f64,
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    /// Peak absolute tap of the windowed kernel.
    pub amplitude: f64,
}

/// Per-filter cutoffs in Hz, sorted by center frequency.
pub fn inspect_filters(bank: &SincFilterBank, sample_rate: u32) -> Result<Vec<FilterInfo>> {
    let rate = sample_rate as f64;
    let mut rows = Vec::with_capacity(bank.len());
    for (index, (f1, f2)) in bank.cutoffs().into_iter().enumerate() {
        let kernel = build_kernel(f1, f2, bank.kernel_len)?;
        rows.push(FilterInfo {
            index,
            f1_hz: f1 * rate,
            f2_hz: f2 * rate,
            center_hz: (f1 + f2) / 2.0 * rate,
            bandwidth_hz: (f2 - f1) * rate,
            amplitude: kernel.iter().fold(0.0, |m: f64, k| m.max(k.abs())),
        });
    }
    rows.sort_by(|a, b| a.center_hz.total_cmp(&b.center_hz).then(a.index.cmp(&b.index)));
    Ok(rows)
}

/// Differentiable kernel construction: `w1, w2: [F] -> [F, L]`.
pub fn sinc_kernels(g: &mut Graph, w1: Var, w2: Var, len: usize, min_low: f64, min_band: f64) -> Result<Var> {
    let (a, b) = (g.value(w1).data().to_vec(), g.value(w2).data().to_vec());
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "sinc_kernels",
            left: g.value(w1).shape().to_vec(),
            right: g.value(w2).shape().to_vec(),
        });
    }
    let window = hamming_window(len);
    let cuts: Vec<Cutoffs> = a
        .iter()
        .zip(&b)
        .map(|(&x, &y)| cutoffs(x, y, min_low, min_band))
        .collect();
    let mut data = Vec::with_capacity(a.len() * len);
    for c in &cuts {
        data.extend(build_kernel(c.f1, c.f2, len)?);
    }
    let value = Tensor::from_vec(&[a.len(), len], data);
    let shape = g.value(w1).shape().to_vec();
    Ok(g.custom(&[w1, w2], value, move |args| {
        let mut g1 = vec![0.0; cuts.len()];
        let mut g2 = vec![0.0; cuts.len()];
        for (i, c) in cuts.iter().enumerate() {
            let grad_row = args.grad.row_slice(i);
            // d/df [2 f sinc(2 pi f n)] = 2 cos(2 pi f n), including n = 0.
            let (mut d_f1, mut d_f2) = (0.0, 0.0);
            for (j, (&gk, &w)) in grad_row.iter().zip(&window).enumerate() {
                let n = tap_offset(j, len);
                d_f1 -= gk * w * 2.0 * (2.0 * PI * c.f1 * n).cos();
                d_f2 += gk * w * 2.0 * (2.0 * PI * c.f2 * n).cos();
            }
            g1[i] = d_f1 * c.df1_dw1 + d_f2 * c.df2_dw1;
            g2[i] = d_f2 * c.df2_dw2;
        }
        vec![Some(Tensor::from_vec(&shape, g1)), Some(Tensor::from_vec(&shape, g2))]
    }))
}

/// Valid strided correlation of every frame with every kernel:
/// `frames: [T, S]`, `kernels: [F, L] -> [T, F, floor((S - L) / stride) + 1]`.
pub fn sinc_conv(g: &mut Graph, frames: Var, kernels: Var, stride: usize) -> Result<Var> {
    let (t_len, s_len) = g.value(frames).dims2();
    let (f_len, l_len) = g.value(kernels).dims2();
    if s_len < l_len || stride == 0 {
        return Err(Error::Config(format!(
            "frame length {s_len} shorter than kernel length {l_len} (stride {stride})"
        )));
    }
    let p_len = (s_len - l_len) / stride + 1;
    let mut out = vec![0.0; t_len * f_len * p_len];
    {
        let x = g.value(frames).data();
        let k = g.value(kernels).data();
        for t in 0..t_len {
            let frame = &x[t * s_len..(t + 1) * s_len];
            for f in 0..f_len {
                let kern = &k[f * l_len..(f + 1) * l_len];
                let dst = &mut out[(t * f_len + f) * p_len..(t * f_len + f + 1) * p_len];
                for (p, o) in dst.iter_mut().enumerate() {
                    let seg = &frame[p * stride..p * stride + l_len];
                    *o = dot(seg, kern);
                }
            }
        }
    }
    let value = Tensor::from_vec(&[t_len, f_len, p_len], out);
    Ok(g.custom(&[frames, kernels], value, move |a| {
        let x = a.inputs[0].data();
        let k = a.inputs[1].data();
        let gr = a.grad.data();
        let dx = a.needs[0].then(|| {
            let mut dx = vec![0.0; t_len * s_len];
            for t in 0..t_len {
                for f in 0..f_len {
                    let kern = &k[f * l_len..(f + 1) * l_len];
                    for p in 0..p_len {
                        let gv = gr[(t * f_len + f) * p_len + p];
                        if gv == 0.0 {
                            continue;
                        }
                        let dst = &mut dx[t * s_len + p * stride..t * s_len + p * stride + l_len];
                        for (d, &kv) in dst.iter_mut().zip(kern) {
                            *d += gv * kv;
                        }
                    }
                }
            }
            Tensor::from_vec(&[t_len, s_len], dx)
        });
        let dk = a.needs[1].then(|| {
            let mut dk = vec![0.0; f_len * l_len];
            for t in 0..t_len {
                let frame = &x[t * s_len..(t + 1) * s_len];
                for f in 0..f_len {
                    let dst = &mut dk[f * l_len..(f + 1) * l_len];
                    for p in 0..p_len {
                        let gv = gr[(t * f_len + f) * p_len + p];
                        if gv == 0.0 {
                            continue;
                        }
                        for (d, &xv) in dst.iter_mut().zip(&frame[p * stride..p * stride + l_len]) {
                            *d += gv * xv;
                        }
                    }
                }
            }
            Tensor::from_vec(&[f_len, l_len], dk)
        });
        vec![dx, dk]
    }))
}

/// The Sinc block: kernel construction, per-frame convolution and activation.
#[derive(Clone, Debug)]
pub struct SincBlock {
    pub cfg: SincConfig,
    pub sample_rate: u32,
}

impl SincBlock {
    pub fn new(cfg: SincConfig, sample_rate: u32) -> Self {
        Self { cfg, sample_rate }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        SincFilterBank::mel(&self.cfg, self.sample_rate)?.insert_into(store)
    }

    /// Pre-activation feature map, `[T, F, T_inner]`.
    pub fn pre_activation(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var> {
        let rate = self.sample_rate as f64;
        let w1 = g.param(store, W1_PARAM)?;
        let w2 = g.param(store, W2_PARAM)?;
        let kernels = sinc_kernels(
            g,
            w1,
            w2,
            self.cfg.kernel_len,
            self.cfg.min_low_hz / rate,
            self.cfg.min_band_hz / rate,
        )?;
        sinc_conv(g, frames, kernels, self.cfg.stride)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var> {
        let pre = self.pre_activation(g, store, frames)?;
        Ok(self.cfg.activation.apply(g, pre))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOW: f64 = 50.0 / 16000.0;

    #[test]
    fn cutoff_examples() {
        let (f1, f2) = cutoffs_from_params(0.1, 0.3, LOW, LOW);
        assert!((f1 - 0.1).abs() < 1e-15 && (f2 - 0.3).abs() < 1e-15);
        let (f1, f2) = cutoffs_from_params(-0.2, 0.1, LOW, LOW);
        assert!((f1 - 0.2).abs() < 1e-15 && (f2 - 0.5).abs() < 1e-15);
        let (f1, f2) = cutoffs_from_params(0.25, 0.25, LOW, LOW);
        assert_eq!(f1, 0.25);
        assert!((f2 - (0.25 + LOW)).abs() < 1e-15 && f2 > f1);
    }

    #[test]
    fn clamped_branches_have_zero_gradient() {
        let c = cutoffs(0.0, 0.0, LOW, LOW);
        assert_eq!((c.df1_dw1, c.df2_dw1, c.df2_dw2), (0.0, 0.0, 0.0));
        let c = cutoffs(0.4, 0.9, LOW, LOW);
        assert_eq!(c.f2, 0.5);
        assert_eq!((c.df2_dw1, c.df2_dw2), (0.0, 0.0));
        assert_eq!(c.df1_dw1, 1.0);
    }

    #[test]
    fn kernel_center_and_degenerate_band() {
        let raw = raw_kernel(0.1, 0.3, 101).unwrap();
        assert!((raw[50] - 0.4).abs() < 1e-15);
        assert!(build_kernel(0.2, 0.2, 101).unwrap().iter().all(|&k| k == 0.0));
        assert!(build_kernel(0.0, 0.2, 101).is_err());
        assert!(build_kernel(0.3, 0.2, 101).is_err());
        assert!(build_kernel(0.1, 0.2, 100).is_err());
    }

    #[test]
    fn kernel_symmetry() {
        let raw = raw_kernel(0.07, 0.19, 101).unwrap();
        for j in 0..101 {
            assert_eq!(raw[j], raw[100 - j]);
        }
        let k = build_kernel(0.07, 0.19, 101).unwrap();
        let peak = k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for j in 0..101 {
            assert!((k[j] - k[100 - j]).abs() <= 1e-2 * peak);
        }
    }

    #[test]
    fn mel_scale_values() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn mel_init_domain_errors() {
        assert!(mel_initialize(8, 100.0, 9000.0, 16000).is_err());
        assert!(mel_initialize(8, 500.0, 400.0, 16000).is_err());
        assert!(mel_initialize(0, 30.0, 8000.0, 16000).is_err());
    }

    #[test]
    fn inspect_arithmetic() {
        let bank = SincFilterBank {
            w1: vec![0.1],
            w2: vec![0.3],
            kernel_len: 101,
            min_low: LOW,
            min_band: LOW,
        };
        let rows = inspect_filters(&bank, 16000).unwrap();
        assert!((rows[0].center_hz - 3200.0).abs() < 1e-9);
        assert!((rows[0].bandwidth_hz - 3200.0).abs() < 1e-9);
    }

    #[test]
    fn sinc_conv_rejects_short_frames() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 50]));
        let k = g.constant(Tensor::zeros(&[3, 101]));
        assert!(matches!(sinc_conv(&mut g, x, k, 1), Err(Error::Config(_))));
    }
}
