//! The full model: front-end, BLSTMP encoder, CTC head and attention decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{joint_loss_op, AttentionConfig, AttentionDecoder, DecoderConfig};
use crate::augment::AugmentPlan;
use crate::ctc::{ctc_loss_op, TokenPosteriors};
use crate::error::Result;
use crate::frontend::{FrontEnd, FrontEndConfig};
use crate::nn::{Blstmp, BlstmpLayer, Graph, Linear, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frontend: FrontEndConfig,
    pub encoder: Vec<BlstmpLayer>,
    pub attention: AttentionConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frontend: FrontEndConfig::default(),
            encoder: vec![BlstmpLayer {
                hidden: 32,
                projection: 32,
            }],
            attention: AttentionConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

/// Parameter counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamSummary {
    pub frontend: usize,
    pub encoder: usize,
    pub ctc: usize,
    pub decoder: usize,
}

impl ParamSummary {
    pub fn backend(&self) -> usize {
        self.encoder + self.ctc + self.decoder
    }

    pub fn total(&self) -> usize {
        self.frontend + self.backend()
    }
}

/// Graph nodes produced by one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub att: Var,
    pub ctc: Var,
    /// `[T, V+1]`.
    pub ctc_logits: Var,
    /// `[L+1, T]`.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct HybridModel {
    pub cfg: ModelConfig,
    pub sample_rate: u32,
    /// Number of real tokens `V`; both heads output `V + 1` symbols.
    pub vocab_size: usize,
}

impl HybridModel {
    pub fn new(cfg: ModelConfig, sample_rate: u32, vocab_size: usize) -> Self {
        Self {
            cfg,
            sample_rate,
            vocab_size,
        }
    }

    pub fn validate(&self, frame_len: usize) -> Result<()> {
        self.cfg.frontend.validate(self.sample_rate, frame_len)?;
        self.decoder().validate()
    }

    pub fn frontend(&self) -> FrontEnd {
        FrontEnd::new(self.cfg.frontend.clone(), self.sample_rate)
    }

    pub fn encoder(&self) -> Blstmp {
        Blstmp::new("enc", self.cfg.frontend.output_dim, self.cfg.encoder.clone())
    }

    pub fn ctc_head(&self) -> Linear {
        Linear::new("ctc.out", self.encoder().output_dim(), self.vocab_size + 1, true)
    }

    pub fn decoder(&self) -> AttentionDecoder {
        AttentionDecoder::new(
            self.cfg.attention.clone(),
            self.cfg.decoder.clone(),
            self.encoder().output_dim(),
            self.vocab_size + 1,
        )
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.frontend().init(&mut store, &mut rng)?;
        self.encoder().init(&mut store, &mut rng)?;
        self.ctc_head().init(&mut store, &mut rng)?;
        self.decoder().init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn param_summary(&self) -> ParamSummary {
        ParamSummary {
            frontend: self.cfg.frontend.num_params(),
            encoder: self.encoder().num_params(),
            ctc: self.ctc_head().num_params(),
            decoder: self.decoder().num_params(),
        }
    }

    /// Front-end features (optionally augmented) and encoder states.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Tensor,
        plan: Option<&AugmentPlan>,
    ) -> Result<(Var, Var)> {
        let x = g.constant(frames.clone());
        let mut features = self.frontend().forward(g, store, x)?;
        if let Some(plan) = plan {
            features = plan.apply_var(g, features)?;
        }
        let states = self.encoder().forward(g, store, features)?;
        Ok((features, states))
    }

    /// `(1 - lambda) * L_att + lambda * L_ctc` for one utterance.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Tensor,
        target: &[usize],
        lambda: f64,
        plan: Option<&AugmentPlan>,
    ) -> Result<LossParts> {
        let (_, states) = self.encode(g, store, frames, plan)?;
        let ctc_logits = self.ctc_head().forward(g, store, states)?;
        let ctc = ctc_loss_op(g, ctc_logits, target)?;
        let (att, attention) = self.decoder().teacher_forced_loss(g, store, states, target)?;
        let total = joint_loss_op(g, att, ctc, lambda)?;
        Ok(LossParts {
            total,
            att,
            ctc,
            ctc_logits,
            attention,
        })
    }

    /// Encoder states and CTC posteriors without augmentation.
    pub fn infer(&self, store: &ParamStore, frames: &Tensor) -> Result<(Tensor, TokenPosteriors)> {
        let mut g = Graph::new();
        let (_, states) = self.encode(&mut g, store, frames, None)?;
        let logits = self.ctc_head().forward(&mut g, store, states)?;
        Ok((g.value(states).clone(), TokenPosteriors::from_logits(g.value(logits))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{DConvBlockConfig, Pooling};
    use crate::sinc::{Activation, SincConfig};

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            frontend: FrontEndConfig {
                sinc: SincConfig {
                    num_filters: 4,
                    kernel_len: 31,
                    stride: 8,
                    ..Default::default()
                },
                blocks: vec![DConvBlockConfig {
                    in_channels: 4,
                    multiplier: 2,
                    kernel_size: 5,
                    stride: 2,
                    pooling: Pooling::Average,
                    activation: Activation::Logc,
                    bias: false,
                }],
                output_dim: 8,
            },
            encoder: vec![BlstmpLayer {
                hidden: 3,
                projection: 4,
            }],
            attention: AttentionConfig {
                att_dim: 4,
                loc_kernel: 3,
                loc_channels: 2,
                ..Default::default()
            },
            decoder: DecoderConfig {
                embed_dim: 3,
                hidden: 4,
                layers: 1,
            },
        }
    }

    #[test]
    fn counts_match_store() {
        let m = HybridModel::new(tiny(), 16_000, 3);
        let store = m.init(1).unwrap();
        let s = m.param_summary();
        assert_eq!(s.total(), store.num_scalars());
        assert_eq!(s.frontend, store.num_scalars_with_prefix("frontend."));
        assert_eq!(s.frontend, 8 + 8 * 5);
    }

    #[test]
    fn lambda_one_leaves_decoder_gradients_zero() {
        let m = HybridModel::new(tiny(), 16_000, 3);
        let store = m.init(2).unwrap();
        let frames = Tensor::from_vec(&[6, 400], (0..2400).map(|i| (i as f64 * 0.05).sin()).collect());
        let mut g = Graph::new();
        let parts = m.loss(&mut g, &store, &frames, &[1, 2], 1.0, None).unwrap();
        let grads = g.backward(parts.total).unwrap();
        let mut seen = 0;
        for (name, grad) in grads.params() {
            if name.starts_with("att.") || name.starts_with("dec.") {
                seen += 1;
                assert!(grad.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(seen > 0);
        let enc = grads.params().find(|(n, _)| n.starts_with("enc.")).unwrap().1;
        assert!(enc.max_abs() > 0.0);
    }
}
