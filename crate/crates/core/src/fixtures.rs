//! Small models with closed-form answers, used for end-to-end checks.

use crate::error::Result;
use crate::nd::func::softplus_inv;
use crate::nd::Tensor;
use crate::vae::{Architecture, NoiseModel, VaeConfig, VaeParams};

/// One-dimensional latent model with `x = [z, z] + N(0, noise^2 I)`.
///
/// The encoder reads only the first feature and is set to the exact
/// posterior `q(z | x1) = N(x1 / (1 + noise^2), noise^2 / (1 + noise^2))`,
/// so it is exact whenever the first cell is observed.
pub fn linear_gaussian(noise: f64) -> Result<VaeParams> {
    let cfg = VaeConfig {
        feature_dim: 2,
        latent_dim: 1,
        hidden_dim: 2,
        num_blocks: 1,
        dropout: 0.0,
        architecture: Architecture::Residual,
        noise_model: NoiseModel::FixedScalar { sigma: noise },
        iwae_k: 1,
    };
    let mut p = VaeParams::zeros(&cfg)?;
    let s2 = noise * noise;
    p.set("enc.in.w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0])?)?;
    p.set("enc.mu.w", Tensor::matrix(1, 2, vec![1.0 / (1.0 + s2), 0.0])?)?;
    p.set("enc.sigma.b", Tensor::vector(vec![softplus_inv((s2 / (1.0 + s2)).sqrt())]))?;
    p.set("dec.in.w", Tensor::matrix(2, 1, vec![1.0, 0.0])?)?;
    p.set("dec.mu.w", Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0])?)?;
    Ok(p)
}

/// Linear decoder `mu(z) = A z + b` with fixed noise; any `A` of shape `[p, d]`
/// with `d <= hidden`. The encoder is left at zero weights (posterior = N(0, ln2^2)).
pub fn linear_decoder(a: &Tensor, b: &[f64], noise: f64, hidden: usize) -> Result<VaeParams> {
    let (p, d) = (a.shape()[0], a.shape()[1]);
    let cfg = VaeConfig {
        feature_dim: p,
        latent_dim: d,
        hidden_dim: hidden.max(d).max(2),
        num_blocks: 1,
        dropout: 0.0,
        architecture: Architecture::Residual,
        noise_model: NoiseModel::FixedScalar { sigma: noise },
        iwae_k: 1,
    };
    let h = cfg.hidden_dim;
    let mut params = VaeParams::zeros(&cfg)?;
    let mut win = vec![0.0; h * d];
    for j in 0..d {
        win[j * d + j] = 1.0;
    }
    params.set("dec.in.w", Tensor::matrix(h, d, win)?)?;
    let mut wmu = vec![0.0; p * h];
    for i in 0..p {
        for j in 0..d {
            wmu[i * h + j] = a.at(i, j);
        }
    }
    params.set("dec.mu.w", Tensor::matrix(p, h, wmu)?)?;
    params.set("dec.mu.b", Tensor::vector(b.to_vec()))?;
    Ok(params)
}
