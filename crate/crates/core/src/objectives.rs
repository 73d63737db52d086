//! Loss family: ELBO (with any noise model), β-VAE and IWAE.
//!
//! All losses are built on one tape by [`build_loss`]. The reparameterisation
//! noise is an explicit `[n * draws, d]` tensor whose row `i * draws + j` is the
//! `j`-th draw for input row `i`, so tests can pin it.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::MaskedData;
use crate::error::{dim_err, Error, Result};
use crate::nd::func::HALF_LN_2PI;
use crate::nd::{Tape, Tensor, Var};
use crate::rng::RngStream;
use crate::vae::{decode_on, encode_on, Bound, DecoderOutput, NoiseModel, VaeParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// Negative ELBO with the model's own noise; `m` reparameterised draws
    /// are averaged (closed-form KL).
    Elbo { m: usize },
    /// Masked squared error plus `beta * KL`; the noise model is ignored.
    Beta { beta: f64 },
    /// Negative importance-weighted bound with `k` draws.
    Iwae { k: usize },
}

impl Objective {
    /// Draws per input row.
    pub fn draws(&self) -> usize {
        match *self {
            Objective::Elbo { m } => m,
            Objective::Beta { .. } => 1,
            Objective::Iwae { k } => k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::Elbo { m: 0 } => Err(Error::Parameter("replicate count m must be >= 1".into())),
            Objective::Iwae { k: 0 } => Err(Error::Parameter("k must be >= 1".into())),
            Objective::Beta { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(Error::Parameter(format!("beta must be positive, got {beta}")))
            }
            _ => Ok(()),
        }
    }
}

/// Batch loss and its parts. `total` is minimised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Batch mean of E_q[log p(x_obs|z)]; for β-VAE the negated squared error.
    pub recon_loglik: f64,
    /// Batch mean closed-form KL.
    pub kl: f64,
    pub per_sample_total: Vec<f64>,
    pub per_sample_recon: Vec<f64>,
    pub per_sample_kl: Vec<f64>,
    pub k: usize,
    pub m: usize,
}

/// Vars of one loss graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    /// Per-row terms whose batch mean is minimised, `[n]`.
    pub per_sample: Var,
    /// Per-row reconstruction log-likelihood averaged over draws, `[n]`
    /// (negated squared error for β-VAE).
    pub recon: Var,
    /// Per-row closed-form KL, `[n]`.
    pub kl: Var,
    pub mu_z: Var,
    pub sigma_z: Var,
}

fn repeat(t: &Tensor, k: usize) -> Tensor {
    if k == 1 {
        return t.clone();
    }
    let idx: Vec<usize> = (0..t.rows()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    t.select_rows(&idx)
}

/// Standard-normal noise for `n` rows of an objective.
pub fn draw_eps(n: usize, objective: &Objective, latent_dim: usize, rng: &mut RngStream) -> Tensor {
    rng.normal_tensor(&[n * objective.draws(), latent_dim])
}

/// Record the loss for `data` on `tape`.
pub fn build_loss(
    tape: &mut Tape,
    params: &VaeParams,
    bound: &Bound,
    data: &MaskedData,
    objective: &Objective,
    eps: &Tensor,
    mut dropout: Option<&mut RngStream>,
) -> Result<LossVars> {
    objective.validate()?;
    let cfg = &params.config;
    let n = data.rows();
    let reps = objective.draws();
    if n == 0 {
        return dim_err("empty batch");
    }
    if eps.shape() != [n * reps, cfg.latent_dim] {
        return dim_err(format!("eps shape {:?} != [{}, {}]", eps.shape(), n * reps, cfg.latent_dim));
    }
    let x = tape.constant(data.values.clone());
    let (mu, sigma) = encode_on(tape, cfg, bound, x, dropout.as_deref_mut())?;
    let mu_r = tape.repeat_rows(mu, reps)?;
    let sig_r = tape.repeat_rows(sigma, reps)?;
    let noise = tape.mul_const(sig_r, eps.clone())?;
    let z = tape.add(mu_r, noise)?;
    let (dmu, dsig) = decode_on(tape, cfg, bound, z, dropout)?;
    let xr = repeat(&data.values, reps);
    let mr = repeat(&data.mask, reps);
    let kl = tape.kl_std_normal(mu, sigma)?;
    let (per_sample, recon) = match *objective {
        Objective::Elbo { m } => {
            let ll = tape.gaussian_loglik(xr, mr, dmu, dsig)?;
            let recon = tape.group_mean(ll, m)?;
            (tape.sub(kl, recon)?, recon)
        }
        Objective::Beta { beta } => {
            let se = tape.masked_sq_err(xr, mr, dmu)?;
            let bkl = tape.scale(kl, beta)?;
            (tape.add(se, bkl)?, tape.scale(se, -1.0)?)
        }
        Objective::Iwae { k } => {
            let ll = tape.gaussian_loglik(xr, mr, dmu, dsig)?;
            let lp = tape.std_normal_log_pdf(z)?;
            let lq = tape.normal_log_pdf(z, mu_r, sig_r)?;
            let a = tape.add(ll, lp)?;
            let lw = tape.sub(a, lq)?;
            let bound = tape.group_log_mean_exp(lw, k)?;
            let recon = tape.group_mean(ll, k)?;
            (tape.scale(bound, -1.0)?, recon)
        }
    };
    let total = tape.mean(per_sample)?;
    Ok(LossVars { total, per_sample, recon, kl, mu_z: mu, sigma_z: sigma })
}

fn breakdown(tape: &Tape, v: &LossVars, objective: &Objective) -> LossBreakdown {
    let get = |x: Var| tape.value(x).data().to_vec();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let per_sample_recon = get(v.recon);
    let per_sample_kl = get(v.kl);
    LossBreakdown {
        total: tape.value(v.total).item(),
        recon_loglik: mean(&per_sample_recon),
        kl: mean(&per_sample_kl),
        per_sample_total: get(v.per_sample),
        per_sample_recon,
        per_sample_kl,
        k: match objective {
            Objective::Iwae { k } => *k,
            _ => 1,
        },
        m: match objective {
            Objective::Elbo { m } => *m,
            _ => 1,
        },
    }
}

/// Loss value at fixed noise, evaluation mode.
pub fn evaluate(params: &VaeParams, data: &MaskedData, objective: &Objective, eps: &Tensor) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &|_| false);
    let v = build_loss(&mut tape, params, &b, data, objective, eps, None)?;
    Ok(breakdown(&tape, &v, objective))
}

/// Loss and gradients for every parameter accepted by `trainable`.
pub fn loss_and_grad(
    params: &VaeParams,
    data: &MaskedData,
    objective: &Objective,
    eps: &Tensor,
    dropout: Option<&mut RngStream>,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(LossBreakdown, IndexMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, trainable);
    let v = build_loss(&mut tape, params, &b, data, objective, eps, dropout)?;
    let mut g = tape.backward(v.total)?;
    let grads = b
        .iter()
        .filter(|(name, _)| trainable(name))
        .map(|(name, var)| (name.to_string(), g.take_or_zeros(var)))
        .collect();
    Ok((breakdown(&tape, &v, objective), grads))
}

fn eval_with_rng(params: &VaeParams, data: &MaskedData, objective: Objective, rng: &mut RngStream) -> Result<LossBreakdown> {
    objective.validate()?;
    let eps = draw_eps(data.rows(), &objective, params.config.latent_dim, rng);
    evaluate(params, data, &objective, &eps)
}

/// Per-row Gaussian log density over observed cells; missing cells add 0.
pub fn masked_gaussian_loglik(x: &Tensor, mask: &Tensor, out: &DecoderOutput) -> Result<Tensor> {
    if x.shape() != mask.shape() || x.shape() != out.mu.shape() || x.shape() != out.sigma.shape() {
        return dim_err("masked_gaussian_loglik: shape mismatch");
    }
    let p = x.cols();
    let rows = (0..x.rows())
        .map(|i| {
            (i * p..(i + 1) * p)
                .filter(|j| mask.data()[*j] != 0.0)
                .map(|j| {
                    let s = out.sigma.data()[j];
                    let r = (x.data()[j] - out.mu.data()[j]) / s;
                    -0.5 * r * r - s.ln() - HALF_LN_2PI
                })
                .sum()
        })
        .collect();
    Ok(Tensor::vector(rows))
}

/// Negative ELBO estimated with `m` draws per row.
pub fn elbo(params: &VaeParams, data: &MaskedData, m: usize, rng: &mut RngStream) -> Result<LossBreakdown> {
    eval_with_rng(params, data, Objective::Elbo { m }, rng)
}

pub fn beta_vae_loss(params: &VaeParams, data: &MaskedData, beta: f64, rng: &mut RngStream) -> Result<LossBreakdown> {
    eval_with_rng(params, data, Objective::Beta { beta }, rng)
}

fn require_noise(params: &VaeParams, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} needs a different noise model, config has {:?}", params.config.noise_model)))
    }
}

/// σ-VAE: negative ELBO with a scalar (fixed or learnable) σ_x.
pub fn sigma_vae_loss(params: &VaeParams, data: &MaskedData, rng: &mut RngStream) -> Result<LossBreakdown> {
    let nm = params.config.noise_model;
    require_noise(params, matches!(nm, NoiseModel::FixedScalar { .. } | NoiseModel::LearnableScalar), "sigma-VAE")?;
    elbo(params, data, 1, rng)
}

/// σ⃗-VAE: per-feature learnable σ_x.
pub fn sigma_vec_vae_loss(params: &VaeParams, data: &MaskedData, rng: &mut RngStream) -> Result<LossBreakdown> {
    require_noise(params, params.config.noise_model == NoiseModel::LearnableVector, "sigma-vector VAE")?;
    elbo(params, data, 1, rng)
}

/// Σ-VAE: σ_x produced by the decoder.
pub fn big_sigma_vae_loss(params: &VaeParams, data: &MaskedData, rng: &mut RngStream) -> Result<LossBreakdown> {
    require_noise(params, params.config.noise_model == NoiseModel::Conditional, "Sigma-VAE")?;
    elbo(params, data, 1, rng)
}

pub fn iwae_loss(params: &VaeParams, data: &MaskedData, k: usize, rng: &mut RngStream) -> Result<LossBreakdown> {
    eval_with_rng(params, data, Objective::Iwae { k }, rng)
}

/// Mean negative IWAE bound over all rows, evaluated in chunks.
pub fn iwae_eval(params: &VaeParams, data: &MaskedData, k: usize, rng: &mut RngStream) -> Result<(f64, f64)> {
    let per = iwae_per_row(params, data, k, rng)?;
    let n = per.len() as f64;
    let mean = per.iter().sum::<f64>() / n;
    let var = if per.len() > 1 { per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok((mean, (var / n).sqrt()))
}

/// Negative IWAE bound for each row.
pub fn iwae_per_row(params: &VaeParams, data: &MaskedData, k: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    let chunk = (8192 / k).max(1);
    let mut out = Vec::with_capacity(data.rows());
    let rows: Vec<usize> = (0..data.rows()).collect();
    for idx in rows.chunks(chunk) {
        let b = iwae_loss(params, &data.select_rows(idx), k, rng)?;
        out.extend(b.per_sample_total);
    }
    Ok(out)
}

/// Max relative error `|a - n| / max(1, |a|, |n|)` between the tape gradient
/// of the batch loss and central differences of step `h`, over every
/// parameter. Dropout is off and the noise `eps` is fixed.
pub fn param_gradcheck(params: &VaeParams, data: &MaskedData, objective: &Objective, eps: &Tensor, h: f64) -> Result<f64> {
    let (_, grads) = loss_and_grad(params, data, objective, eps, None, &|_| true)?;
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        for j in 0..g.len() {
            let orig = work.get(name)?.data()[j];
            work.get_mut(name)?.data_mut()[j] = orig + h;
            let up = evaluate(&work, data, objective, eps)?.total;
            work.get_mut(name)?.data_mut()[j] = orig - h;
            let down = evaluate(&work, data, objective, eps)?.total;
            work.get_mut(name)?.data_mut()[j] = orig;
            let n = (up - down) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - n).abs() / 1f64.max(a.abs()).max(n.abs()));
        }
    }
    Ok(worst)
}
