//! Finite-difference gradient checks for every differentiable operation,
//! run on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, AttentionDecoder, DecoderConfig};
use crate::ctc::ctc_loss_op;
use crate::error::Result;
use crate::frontend::{dconv, DConvBlockConfig, FrontEnd, FrontEndConfig, Pooling};
use crate::nn::{check_gradients, check_param_gradients, GradCheckOptions, LstmCell, ParamStore, Tensor};
use crate::sinc::{sinc_kernels, Activation, SincConfig};

pub const EPSILON: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub op: &'static str,
    pub instance: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Values bounded away from zero, where `logc` and `relu` have kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, values)
}

pub(crate) fn tiny_frontend() -> FrontEndConfig {
    FrontEndConfig {
        sinc: SincConfig {
            num_filters: 3,
            kernel_len: 21,
            stride: 4,
            ..Default::default()
        },
        blocks: vec![
            DConvBlockConfig {
                in_channels: 3,
                multiplier: 2,
                kernel_size: 5,
                stride: 2,
                pooling: Pooling::None,
                activation: Activation::Logc,
                bias: true,
            },
            DConvBlockConfig {
                in_channels: 6,
                multiplier: 1,
                kernel_size: 3,
                stride: 1,
                pooling: Pooling::Average,
                activation: Activation::Logc,
                bias: false,
            },
        ],
        output_dim: 6,
    }
}

fn all_names(store: &ParamStore) -> Vec<String> {
    store.names().map(String::from).collect()
}

/// Runs `instances` random checks of each operation. Instance `i` of every
/// case draws from a stream seeded by `(seed, i)`.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    let opts = GradCheckOptions {
        epsilon: EPSILON,
        max_coords_per_tensor: Some(40),
    };
    for instance in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(instance as u64);
        let mut push = |op, r: crate::nn::GradCheckReport| {
            cases.push(GradCase {
                op,
                instance,
                max_rel_error: r.max_rel_error,
                worst: r.worst,
                coords_checked: r.coords_checked,
            })
        };

        let x = away_from_zero(&mut rng, &[2, 5]);
        push("logc", check_gradients(|g, v| Ok(g.logc(v[0])), &[x], EPSILON)?);

        let w1 = random(&mut rng, &[3], 0.02, 0.2);
        let w2 = w1.map(|v| v + 0.05 + 0.1 * (v * 37.0).sin().abs());
        push(
            "sinc_kernel",
            check_gradients(
                |g, v| sinc_kernels(g, v[0], v[1], 31, 50.0 / 16000.0, 50.0 / 16000.0),
                &[w1, w2],
                EPSILON,
            )?,
        );

        let x = random(&mut rng, &[2, 3, 12], -1.0, 1.0);
        let w = random(&mut rng, &[6, 5], -0.5, 0.5);
        let b = random(&mut rng, &[6], -0.5, 0.5);
        push(
            "dconv",
            check_gradients(|g, v| dconv(g, v[0], v[1], Some(v[2]), 2), &[x, w, b], EPSILON)?,
        );

        let x = random(&mut rng, &[3, 4], -1.0, 1.0);
        let w = random(&mut rng, &[4, 5], -1.0, 1.0);
        let b = random(&mut rng, &[1, 5], -1.0, 1.0);
        push(
            "linear",
            check_gradients(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    g.add_row(y, v[2])
                },
                &[x, w, b],
                EPSILON,
            )?,
        );

        let x = random(&mut rng, &[2, 7], -3.0, 3.0);
        push(
            "softmax",
            check_gradients(|g, v| Ok(g.softmax(v[0])), std::slice::from_ref(&x), EPSILON)?,
        );
        push(
            "log_softmax",
            check_gradients(|g, v| Ok(g.log_softmax(v[0])), &[x], EPSILON)?,
        );

        let cell = LstmCell::new("cell", 3, 4);
        let mut store = ParamStore::new();
        cell.init(&mut store, &mut rng)?;
        let (x, h, c) = (
            random(&mut rng, &[1, 3], -1.0, 1.0),
            random(&mut rng, &[1, 4], -1.0, 1.0),
            random(&mut rng, &[1, 4], -1.0, 1.0),
        );
        let names = all_names(&store);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        push(
            "lstm_step",
            check_param_gradients(
                |g, s| {
                    let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
                    let (h2, c2) = cell.step(g, s, xv, hv, cv)?;
                    g.concat_cols(&[h2, c2])
                },
                &store,
                Some(&refs),
                &opts,
            )?,
        );

        let decoder = AttentionDecoder::new(
            AttentionConfig {
                att_dim: 4,
                loc_kernel: 3,
                loc_channels: 2,
                sharpness: 1.5,
                bias: false,
            },
            DecoderConfig {
                embed_dim: 3,
                hidden: 4,
                layers: 1,
            },
            3,
            4,
        );
        let mut store = ParamStore::new();
        decoder.init(&mut store, &mut rng)?;
        let states = random(&mut rng, &[5, 3], -1.0, 1.0);
        let target: Vec<usize> = (0..3).map(|_| rng.gen_range(1..4)).collect();
        let names = all_names(&store);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        push(
            "attention",
            check_param_gradients(
                |g, s| {
                    let h = g.constant(states.clone());
                    Ok(decoder.teacher_forced_loss(g, s, h, &target)?.0)
                },
                &store,
                Some(&refs),
                &opts,
            )?,
        );
        push(
            "attention_states",
            check_gradients(
                |g, v| Ok(decoder.teacher_forced_loss(g, &store, v[0], &target)?.0),
                &[states],
                EPSILON,
            )?,
        );

        let logits = random(&mut rng, &[6, 4], -2.0, 2.0);
        let target: Vec<usize> = (0..3).map(|_| rng.gen_range(1..4)).collect();
        push(
            "ctc_loss",
            check_gradients(|g, v| ctc_loss_op(g, v[0], &target), &[logits], EPSILON)?,
        );

        let fe = FrontEnd::new(tiny_frontend(), 16_000);
        let mut store = ParamStore::new();
        fe.init(&mut store, &mut rng)?;
        // Interior cutoffs: the mel initialization puts the last upper edge
        // exactly on the Nyquist clamp, where the derivative is one-sided.
        let w1 = random(&mut rng, &[3], 0.02, 0.2);
        let w2 = w1.map(|v| v + 0.05 + 0.1 * (v * 37.0).sin().abs());
        store.set(crate::sinc::W1_PARAM, w1)?;
        store.set(crate::sinc::W2_PARAM, w2)?;
        let frames = random(&mut rng, &[2, 120], -0.8, 0.8);
        let names = all_names(&store);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        push(
            "frontend_chain",
            check_param_gradients(
                |g, s| {
                    let x = g.constant(frames.clone());
                    fe.forward(g, s, x)
                },
                &store,
                Some(&refs),
                &opts,
            )?,
        );
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_instance() {
        let cases = gradient_suite(3, 1).unwrap();
        for c in &cases {
            assert!(c.max_rel_error < 1e-4, "{c:?}");
            assert!(c.coords_checked > 0);
        }
    }
}
