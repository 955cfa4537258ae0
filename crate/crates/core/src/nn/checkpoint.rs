//! Versioned JSON snapshot of a [`ParamStore`] plus run metadata.
//!
//! Floats are written in shortest round-trip form, so load followed by save
//! reproduces the original bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "lsc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Echo of the configuration the parameters were produced with.
    pub config: serde_json::Value,
    /// Free-form metadata such as the tokenizer alphabet.
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value, seed: u64) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, value) in store.iter() {
            if !value.all_finite() {
                return Err(Error::Numeric(format!("parameter `{name}` has non-finite values")));
            }
            params.insert(
                name.to_string(),
                ParamEntry {
                    shape: value.shape().to_vec(),
                    values: value.data().to_vec(),
                },
            );
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            config,
            metadata: BTreeMap::new(),
            params,
        })
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, entry) in &self.params {
            let t = Tensor::new(entry.shape.clone(), entry.values.clone())
                .map_err(|_| Error::Checkpoint(format!("parameter `{name}`: shape does not match value count")))?;
            store.insert(name.clone(), t)?;
        }
        Ok(store)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
