use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    Residual,
}

/// Decoder output-noise model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseModel {
    /// Constant σ_x, not trained.
    FixedScalar { sigma: f64 },
    /// σ_x = softplus(s), one scalar.
    LearnableScalar,
    /// σ_x,i = softplus(s_i), one per feature.
    LearnableVector,
    /// σ_x = softplus(head(h)), a function of z.
    Conditional,
}

impl NoiseModel {
    /// The fixed σ_x that makes the σ-VAE loss a rescaled β-VAE loss.
    pub fn fixed_for_beta(beta: f64) -> Self {
        NoiseModel::FixedScalar { sigma: (beta / 2.0).sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Residual blocks (or hidden layers for the MLP) per side.
    pub num_blocks: usize,
    pub dropout: f64,
    pub architecture: Architecture,
    pub noise_model: NoiseModel,
    pub iwae_k: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            feature_dim: 40,
            latent_dim: 32,
            hidden_dim: 64,
            num_blocks: 2,
            dropout: 0.1,
            architecture: Architecture::Residual,
            noise_model: NoiseModel::LearnableScalar,
            iwae_k: 1,
        }
    }
}

impl VaeConfig {
    /// Small residual net used by the two-dimensional toy experiments.
    pub fn toy(noise_model: NoiseModel) -> Self {
        Self {
            feature_dim: 2,
            latent_dim: 4,
            hidden_dim: 64,
            num_blocks: 2,
            dropout: 0.0,
            architecture: Architecture::Residual,
            noise_model,
            iwae_k: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1");
        }
        if self.architecture == Architecture::Residual && self.hidden_dim < 2 {
            return bad("residual blocks need hidden_dim >= 2 for layer norm");
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.iwae_k == 0 {
            return bad("iwae_k must be >= 1");
        }
        if let NoiseModel::FixedScalar { sigma } = self.noise_model {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return bad("fixed sigma must be positive");
            }
        }
        Ok(())
    }
}
