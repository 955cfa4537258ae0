//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::check_lambda;
use crate::audio::frame_geometry;
use crate::augment::AugmentPolicy;
use crate::decoding::BeamConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{ToneCorpusConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub shift_ms: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_ms: 25.0,
            shift_ms: 10.0,
        }
    }
}

impl AudioConfig {
    /// `(frame_len, hop)` in samples.
    pub fn geometry(&self) -> Result<(usize, usize)> {
        frame_geometry(self.sample_rate, self.frame_ms, self.shift_ms)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub train: TrainConfig,
    pub decode: BeamConfig,
    pub corpus: ToneCorpusConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Rejects settings that cannot work before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let (frame_len, _) = self.audio.geometry()?;
        self.model.frontend.validate(self.audio.sample_rate, frame_len)?;
        if self.model.encoder.is_empty() {
            return Err(Error::Config("model.encoder needs at least one layer".into()));
        }
        check_lambda(self.train.lambda).map_err(|e| Error::Config(format!("train.lambda: {e}")))?;
        self.decode
            .validate()
            .map_err(|e| Error::Config(format!("decode: {e}")))?;
        self.train.validate()?;
        self.corpus.validate(self.audio.sample_rate)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn impossible_settings_are_rejected() {
        for text in [
            "[model.frontend.sinc]\nf_max_hz = 9000.0\n",
            "[model.frontend.sinc]\nkernel_len = 401\n",
            "[train]\nlambda = 1.5\n",
            "[decode]\nlambda = -0.1\n",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
