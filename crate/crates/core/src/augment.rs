//! Masking and time warping of feature sequences.
//!
//! Augmentation is sampled as an [`AugmentPlan`]: an optional linear warp
//! over time followed by a 0/1 mask. Because both are linear in the features
//! the same plan can be applied to plain values or to graph nodes, so the
//! front-end still receives gradients through augmented inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::nn::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub num_time_masks: usize,
    pub max_time_mask_frames: usize,
    pub num_channel_masks: usize,
    pub max_channel_mask: usize,
    /// Maximum warp shift in frames; 0 disables warping.
    pub warp_window: usize,
    /// Sample spans zeroed in the raw waveform before the front-end.
    pub num_audio_masks: usize,
    pub max_audio_mask_samples: usize,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            num_time_masks: 2,
            max_time_mask_frames: 40,
            num_channel_masks: 2,
            max_channel_mask: 30,
            warp_window: 5,
            num_audio_masks: 0,
            max_audio_mask_samples: 1600,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves every input unchanged.
    pub fn disabled() -> Self {
        Self {
            num_time_masks: 0,
            num_channel_masks: 0,
            warp_window: 0,
            num_audio_masks: 0,
            ..Self::default()
        }
    }

    /// Independent stream for one utterance in one epoch.
    pub fn rng_for(&self, epoch: usize, utterance: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.set_stream(utterance as u64);
        rng
    }

    /// Samples a warp (if enabled and the sequence is long enough) and the
    /// time and channel masks for a `[frames, channels]` sequence.
    pub fn sample(&self, frames: usize, channels: usize, rng: &mut impl Rng) -> AugmentPlan {
        let warp = sample_warp(frames, self.warp_window, rng).map(|(c, s)| warp_matrix(frames, c, s));
        let mut mask = Tensor::full(&[frames, channels], 1.0);
        for (start, width) in sample_spans(frames, self.num_time_masks, self.max_time_mask_frames, rng) {
            for t in start..start + width {
                mask.data_mut()[t * channels..(t + 1) * channels].fill(0.0);
            }
        }
        for (start, width) in sample_spans(channels, self.num_channel_masks, self.max_channel_mask, rng) {
            for t in 0..frames {
                mask.data_mut()[t * channels + start..t * channels + start + width].fill(0.0);
            }
        }
        AugmentPlan { warp, mask }
    }
}

/// `count` spans with width uniform in `[0, min(max_width, len)]` and a
/// uniform start such that the span fits.
fn sample_spans(len: usize, count: usize, max_width: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let width = rng.gen_range(0..=max_width.min(len));
            let start = rng.gen_range(0..=len - width);
            (start, width)
        })
        .collect()
}

/// Center `c` in `[W, T-W)` and shift `s` in `[-W, W]`, or `None` when
/// warping is disabled or `T <= 2W`.
fn sample_warp(frames: usize, window: usize, rng: &mut impl Rng) -> Option<(usize, isize)> {
    if window == 0 {
        return None;
    }
    if frames <= 2 * window {
        log::debug!("time warp skipped: {frames} frames with window {window}");
        return None;
    }
    let center = rng.gen_range(window..frames - window);
    let shift = rng.gen_range(-(window as isize)..=window as isize);
    Some((center, shift))
}

/// Source position of output frame `i` under the piecewise-linear map that
/// fixes both endpoints and sends `center` to `center + shift`.
pub fn warp_source(i: usize, frames: usize, center: usize, shift: isize) -> f64 {
    let last = (frames - 1) as f64;
    let c = center as f64;
    let target = (center as isize + shift) as f64;
    let i = i as f64;
    if i >= last {
        last
    } else if i <= target {
        if target > 0.0 {
            i * c / target
        } else {
            0.0
        }
    } else {
        c + (i - target) * (last - c) / (last - target)
    }
}

/// `[T, T]` interpolation matrix `M` with `warped = M x`.
pub fn warp_matrix(frames: usize, center: usize, shift: isize) -> Tensor {
    let mut m = Tensor::zeros(&[frames, frames]);
    for i in 0..frames {
        let src = warp_source(i, frames, center, shift).clamp(0.0, (frames - 1) as f64);
        let lo = src.floor() as usize;
        let frac = src - lo as f64;
        m.data_mut()[i * frames + lo] += 1.0 - frac;
        if frac > 0.0 {
            m.data_mut()[i * frames + lo + 1] += frac;
        }
    }
    m
}

/// A sampled augmentation for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub warp: Option<Tensor>,
    /// 0/1 mask, `[T, C]`.
    pub mask: Tensor,
}

impl AugmentPlan {
    pub fn apply(&self, values: &Tensor) -> Result<Tensor> {
        let warped = match &self.warp {
            Some(m) => m.matmul(values)?,
            None => values.clone(),
        };
        if warped.shape() != self.mask.shape() {
            return Err(Error::Dimension {
                op: "augment",
                left: warped.shape().to_vec(),
                right: self.mask.shape().to_vec(),
            });
        }
        Ok(warped.zip_map(&self.mask, |v, m| v * m))
    }

    pub fn apply_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = match &self.warp {
            Some(m) => {
                let m = g.constant(m.clone());
                g.matmul(m, x)?
            }
            None => x,
        };
        g.mul_const(x, self.mask.clone())
    }
}

/// Training applies augmentation; evaluation never does.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Samples a plan in training mode and `None` in evaluation mode.
pub fn plan_for(
    mode: Mode,
    policy: &AugmentPolicy,
    frames: usize,
    channels: usize,
    rng: &mut impl Rng,
) -> Option<AugmentPlan> {
    match mode {
        Mode::Train => Some(policy.sample(frames, channels, rng)),
        Mode::Eval => None,
    }
}

fn with_values(features: &FeatureSequence, values: Tensor) -> FeatureSequence {
    FeatureSequence {
        values,
        frame_len: features.frame_len,
        hop: features.hop,
    }
}

/// Time and channel masks only.
pub fn apply_masks(features: &FeatureSequence, policy: &AugmentPolicy, rng: &mut impl Rng) -> FeatureSequence {
    let masks_only = AugmentPolicy {
        warp_window: 0,
        ..policy.clone()
    };
    let plan = masks_only.sample(features.num_frames(), features.dim(), rng);
    with_values(
        features,
        plan.apply(&features.values).expect("plan sampled for this shape"),
    )
}

/// Warp only. Sequences with `T <= 2W` are returned unchanged.
pub fn apply_time_warp(features: &FeatureSequence, policy: &AugmentPolicy, rng: &mut impl Rng) -> FeatureSequence {
    match sample_warp(features.num_frames(), policy.warp_window, rng) {
        Some((c, s)) => {
            let m = warp_matrix(features.num_frames(), c, s);
            with_values(features, m.matmul(&features.values).expect("square warp over T frames"))
        }
        None => features.clone(),
    }
}

/// Zeroes random sample spans of a waveform.
pub fn apply_audio_masks(samples: &[f64], policy: &AugmentPolicy, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = samples.to_vec();
    for (start, width) in sample_spans(
        samples.len(),
        policy.num_audio_masks,
        policy.max_audio_mask_samples,
        rng,
    ) {
        out[start..start + width].fill(0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(t: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> FeatureSequence {
        let mut data = Vec::with_capacity(t * c);
        for i in 0..t {
            for j in 0..c {
                data.push(f(i, j));
            }
        }
        FeatureSequence {
            values: Tensor::from_vec(&[t, c], data),
            frame_len: 400,
            hop: 160,
        }
    }

    #[test]
    fn zero_width_policy_is_identity() {
        let x = features(20, 6, |i, j| (i * 7 + j) as f64 * 0.1);
        let policy = AugmentPolicy {
            max_time_mask_frames: 0,
            max_channel_mask: 0,
            ..Default::default()
        };
        let y = apply_masks(&x, &policy, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(y, x);
    }

    #[test]
    fn full_width_mask_zeroes_everything() {
        let x = features(10, 3, |_, _| 1.5);
        let mut mask = Tensor::full(&[10, 3], 1.0);
        // One span that covers the sequence, as produced by width = T.
        for t in 0..10 {
            mask.data_mut()[t * 3..t * 3 + 3].fill(0.0);
        }
        let plan = AugmentPlan { warp: None, mask };
        assert!(plan.apply(&x.values).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_shift_warp_is_identity() {
        let m = warp_matrix(12, 5, 0);
        let x = features(12, 2, |i, j| (i * i + j) as f64);
        assert_eq!(m.matmul(&x.values).unwrap(), x.values);
    }

    #[test]
    fn warp_maps_center_and_fixes_endpoints() {
        assert_eq!(warp_source(0, 20, 8, 3), 0.0);
        assert_eq!(warp_source(19, 20, 8, 3), 19.0);
        assert!((warp_source(11, 20, 8, 3) - 8.0).abs() < 1e-12);
        assert_eq!(warp_source(0, 20, 5, -5), 0.0);
    }

    #[test]
    fn warp_rows_are_convex_combinations() {
        let m = warp_matrix(17, 6, -4);
        for i in 0..17 {
            let row = &m.data()[i * 17..(i + 1) * 17];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn short_sequences_skip_warp() {
        let x = features(10, 2, |i, _| i as f64);
        let y = apply_time_warp(&x, &AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(y, x);
    }

    #[test]
    fn eval_mode_bypasses_augmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(plan_for(Mode::Eval, &AugmentPolicy::default(), 50, 8, &mut rng).is_none());
        assert!(plan_for(Mode::Train, &AugmentPolicy::default(), 50, 8, &mut rng).is_some());
    }

    #[test]
    fn graph_application_matches_values() {
        let x = features(30, 4, |i, j| ((i * 3 + j) as f64).sin());
        let plan = AugmentPolicy::default().sample(30, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let mut g = Graph::new();
        let v = g.constant(x.values.clone());
        let y = plan.apply_var(&mut g, v).unwrap();
        assert_eq!(g.value(y), &plan.apply(&x.values).unwrap());
    }

    #[test]
    fn audio_masks_zero_spans() {
        let policy = AugmentPolicy {
            num_audio_masks: 1,
            max_audio_mask_samples: 50,
            ..Default::default()
        };
        let x = vec![1.0; 200];
        let y = apply_audio_masks(&x, &policy, &mut ChaCha8Rng::seed_from_u64(4));
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros <= 50);
        assert!(y.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
