//! Versioned JSON checkpoints.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so a save/load cycle reproduces every weight bit for bit.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{AdamConfig, AdamState, Tensor};
use crate::surfaces::Standardizer;
use crate::vae::config::VaeConfig;
use crate::vae::params::{VaeParams, INIT_SCHEME};

pub const CHECKPOINT_FORMAT: &str = "volimpute-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: VaeConfig,
    pub seed: u64,
    pub step: u64,
    pub adam: AdamConfig,
    pub init_scheme: String,
    pub params: IndexMap<String, Tensor>,
    #[serde(default)]
    pub optimizer: Option<AdamState>,
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
    /// Free-form provenance, e.g. the run configuration that produced it.
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: &VaeParams, seed: u64, step: u64, adam: AdamConfig) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: params.config.clone(),
            seed,
            step,
            adam,
            init_scheme: INIT_SCHEME.into(),
            params: params.tensors.clone(),
            optimizer: None,
            standardizer: None,
            run_config: None,
        }
    }

    pub fn vae_params(&self) -> Result<VaeParams> {
        let p = VaeParams { config: self.config.clone(), tensors: self.params.clone() };
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.vae_params()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
