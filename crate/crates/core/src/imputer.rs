//! Distributional imputation: self-normalised importance sampling over
//! encoder draws, encoder refitting and the pseudo-Gibbs baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MaskedData;
use crate::error::{Error, Result};
use crate::nd::func::{log_sum_exp, normal_log_pdf};
use crate::nd::{AdamConfig, LrSchedule, Tensor};
use crate::objectives::{draw_eps, evaluate, Objective};
use crate::rng::RngStream;
use crate::train::{TrainConfig, TrainScope, Trainer};
use crate::vae::{decode, encode, reparam_sample, LatentPosterior, VaeParams};

/// Decoder rows evaluated per forward pass.
const CHUNK_ROWS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitMode {
    None,
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsConfig {
    pub burn_in: usize,
    pub thinning: usize,
    pub kept: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self { burn_in: 100, thinning: 5, kept: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputationConfig {
    pub n_samples: usize,
    pub refit: RefitMode,
    pub refit_steps: u64,
    pub refit_batch: usize,
    pub refit_k: usize,
    pub refit_lr: LrSchedule,
    /// Validation objective is checked every this many refit steps.
    pub refit_eval_every: u64,
    pub gibbs: GibbsConfig,
    pub seed: u64,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            refit: RefitMode::None,
            refit_steps: 10_000,
            refit_batch: 32,
            refit_k: 50,
            refit_lr: LrSchedule { warmup_start: 1e-7, warmup_end: 2e-4, warmup_steps: 100, decay_step: None, decay_factor: 1.0 },
            refit_eval_every: 500,
            gibbs: GibbsConfig::default(),
            seed: 0,
        }
    }
}

impl ImputationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if self.refit_batch == 0 || self.refit_k == 0 || self.refit_eval_every == 0 {
            return Err(Error::Config("refit batch, k and eval interval must be >= 1".into()));
        }
        if self.gibbs.thinning == 0 {
            return Err(Error::Config("gibbs thinning must be >= 1".into()));
        }
        Ok(())
    }
}

/// Posterior predictive moments for one row.
///
/// `mean` and `variance` cover every cell; for observed cells they are the
/// posterior-weighted reconstruction. `missing` lists the cells that were
/// not observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationResult {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub missing: Vec<usize>,
    pub weights: Vec<f64>,
    pub ess: f64,
}

impl ImputationResult {
    pub fn missing_mean(&self) -> Vec<f64> {
        self.missing.iter().map(|&c| self.mean[c]).collect()
    }

    pub fn missing_variance(&self) -> Vec<f64> {
        self.missing.iter().map(|&c| self.variance[c]).collect()
    }
}

fn single_row(data: &MaskedData) -> Result<()> {
    if data.rows() != 1 {
        return Err(Error::Dimension(format!("expected one row, got {}", data.rows())));
    }
    Ok(())
}

/// Unnormalised log weights `log p(x_o|z) + log p(z) - log q(z|x_o)` for
/// draws `z` of one row. Also returns the decoder output for each draw.
fn log_weights_and_outputs(
    params: &VaeParams,
    row: &MaskedData,
    post: &LatentPosterior,
    z: &Tensor,
) -> Result<(Vec<f64>, Tensor, Tensor)> {
    let n = z.rows();
    let p = params.config.feature_dim;
    let (mu0, sig0) = (post.mu.row(0), post.sigma.row(0));
    let zeros = vec![0.0; params.config.latent_dim];
    let ones = vec![1.0; params.config.latent_dim];
    let mut lw = Vec::with_capacity(n);
    let mut mus = Vec::with_capacity(n * p);
    let mut sigs = Vec::with_capacity(n * p);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK_ROWS) {
        let zc = z.select_rows(chunk);
        let out = decode(params, &zc, None)?;
        for (r, _) in chunk.iter().enumerate() {
            let zr = zc.row(r);
            let mut ll = 0.0;
            for c in 0..p {
                if row.mask.data()[c] != 0.0 {
                    ll += normal_log_pdf(&[row.values.data()[c]], &[out.mu.at(r, c)], &[out.sigma.at(r, c)]);
                }
            }
            lw.push(ll + normal_log_pdf(zr, &zeros, &ones) - normal_log_pdf(zr, mu0, sig0));
        }
        mus.extend_from_slice(out.mu.data());
        sigs.extend_from_slice(out.sigma.data());
    }
    Ok((lw, Tensor::new(vec![n, p], mus)?, Tensor::new(vec![n, p], sigs)?))
}

/// Normalise log weights; all `-inf` is a degenerate posterior.
pub fn normalize_log_weights(lw: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(lw);
    if !lse.is_finite() {
        return Err(Error::DegeneratePosterior(format!("log-sum-exp of importance weights is {lse}")));
    }
    Ok(lw.iter().map(|v| (v - lse).exp()).collect())
}

pub fn effective_sample_size(w: &[f64]) -> f64 {
    1.0 / w.iter().map(|v| v * v).sum::<f64>()
}

/// Self-normalised importance weights of `z_draws` (drawn from `q(z|x_o)`).
pub fn importance_weights(params: &VaeParams, row: &MaskedData, z_draws: &Tensor) -> Result<Vec<f64>> {
    single_row(row)?;
    let post = encode(params, &row.values, None)?;
    let (lw, _, _) = log_weights_and_outputs(params, row, &post, z_draws)?;
    normalize_log_weights(&lw)
}

/// Mixture moments: `mean = Σ w mu`, `var = Σ w (sigma^2 + mu^2) - mean^2`.
pub fn mixture_moments(weights: &[f64], mu: &Tensor, sigma: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let p = mu.cols();
    let mut mean = vec![0.0; p];
    let mut second = vec![0.0; p];
    for (i, w) in weights.iter().enumerate() {
        for c in 0..p {
            let (m, s) = (mu.at(i, c), sigma.at(i, c));
            mean[c] += w * m;
            second[c] += w * (s * s + m * m);
        }
    }
    let var = mean.iter().zip(&second).map(|(m, s2)| (s2 - m * m).max(0.0)).collect();
    (mean, var)
}

/// Posterior predictive moments for one row using `cfg.n_samples` encoder draws.
pub fn impute_moments(params: &VaeParams, row: &MaskedData, n_samples: usize, rng: &mut RngStream) -> Result<ImputationResult> {
    single_row(row)?;
    if n_samples == 0 {
        return Err(Error::Parameter("n_samples must be >= 1".into()));
    }
    let d = params.config.latent_dim;
    let missing: Vec<usize> = (0..row.cols()).filter(|c| row.mask.data()[*c] == 0.0).collect();
    let eps = rng.normal_tensor(&[n_samples, d]);
    let (weights, mu, sigma) = if missing.len() == row.cols() {
        // nothing observed: prior predictive, uniform weights over prior draws
        let mut mus = Vec::new();
        let mut sigs = Vec::new();
        let idx: Vec<usize> = (0..n_samples).collect();
        for chunk in idx.chunks(CHUNK_ROWS) {
            let out = decode(params, &eps.select_rows(chunk), None)?;
            mus.extend(out.mu.into_data());
            sigs.extend(out.sigma.into_data());
        }
        let p = row.cols();
        (
            vec![1.0 / n_samples as f64; n_samples],
            Tensor::new(vec![n_samples, p], mus)?,
            Tensor::new(vec![n_samples, p], sigs)?,
        )
    } else {
        let post = encode(params, &row.values, None)?;
        let rep = LatentPosterior {
            mu: post.mu.select_rows(&vec![0; n_samples]),
            sigma: post.sigma.select_rows(&vec![0; n_samples]),
        };
        let z = reparam_sample(&rep, &eps)?;
        let (lw, mu, sigma) = log_weights_and_outputs(params, row, &post, &z)?;
        (normalize_log_weights(&lw)?, mu, sigma)
    };
    let (mean, variance) = mixture_moments(&weights, &mu, &sigma);
    let ess = effective_sample_size(&weights);
    Ok(ImputationResult { mean, variance, missing, weights, ess })
}

/// [`impute_moments`] for every row; row `i` uses stream `seed.fork(i)`.
/// Rows run in parallel; results do not depend on the thread count.
pub fn impute_all(params: &VaeParams, data: &MaskedData, n_samples: usize, seed: u64) -> Result<Vec<ImputationResult>> {
    let base = RngStream::new(seed);
    (0..data.rows())
        .into_par_iter()
        .map(|i| impute_moments(params, &data.select_rows(&[i]), n_samples, &mut base.fork(i as u64)))
        .collect()
}

/// Retrain only the encoder on `data` with the IWAE objective, keeping the
/// decoder and noise parameters fixed.
///
/// Dropout is off during refitting. The objective on `validation` (or on
/// `data` when `None`) is measured with fixed noise at the start and every
/// `refit_eval_every` steps, and the best encoder seen is returned, so the
/// result is never worse than the input on that fixed-noise objective.
pub fn refit_encoder(
    params: &VaeParams,
    data: &MaskedData,
    validation: Option<&MaskedData>,
    cfg: &ImputationConfig,
) -> Result<VaeParams> {
    cfg.validate()?;
    if cfg.refit_steps == 0 || data.rows() == 0 {
        return Ok(params.clone());
    }
    let mut work = params.clone();
    work.config.dropout = 0.0;
    let objective = Objective::Iwae { k: cfg.refit_k };
    let val = validation.unwrap_or(data);
    let val_eps = draw_eps(val.rows(), &objective, work.config.latent_dim, &mut RngStream::new(cfg.seed).fork(7));
    let score = |p: &VaeParams| -> Result<f64> { chunked_eval(p, val, &objective, &val_eps) };

    let tc = TrainConfig {
        steps: cfg.refit_steps,
        batch_size: cfg.refit_batch,
        schedule: cfg.refit_lr,
        adam: AdamConfig { weight_decay: 0.0, ..AdamConfig::default() },
        seed: cfg.seed,
        objective: Some(objective),
        scope: TrainScope::EncoderOnly,
    };
    let mut best = score(&work)?;
    let mut best_params = work.clone();
    let mut trainer = Trainer::new(work, tc)?;
    trainer.run(data, |t, _| {
        if t.step % cfg.refit_eval_every == 0 || t.step == cfg.refit_steps {
            let s = score(&t.params)?;
            if s < best {
                best = s;
                best_params = t.params.clone();
            }
        }
        Ok(())
    })?;
    best_params.config.dropout = params.config.dropout;
    Ok(best_params)
}

fn chunked_eval(params: &VaeParams, data: &MaskedData, objective: &Objective, eps: &Tensor) -> Result<f64> {
    let k = objective.draws();
    let rows_per = (8192 / k).max(1);
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.rows()).collect();
    for chunk in idx.chunks(rows_per) {
        let eidx: Vec<usize> = chunk.iter().flat_map(|i| i * k..(i + 1) * k).collect();
        let b = evaluate(params, &data.select_rows(chunk), objective, &eps.select_rows(&eidx))?;
        total += b.total * chunk.len() as f64;
    }
    Ok(total / data.rows() as f64)
}

/// Pseudo-Gibbs chain for every row of `data`.
///
/// Start with missing cells at zero, then repeat: z ~ q(z|x), x' ~ p(x|z),
/// overwrite the missing cells of x with x'. After `burn_in` iterations every
/// `thinning`-th state is kept until `kept` states are collected. Returns
/// `kept` tensors of shape `[n, p]`.
pub fn pseudo_gibbs(params: &VaeParams, data: &MaskedData, cfg: &GibbsConfig, rng: &mut RngStream) -> Result<Vec<Tensor>> {
    if cfg.thinning == 0 || cfg.kept == 0 {
        return Err(Error::Parameter("gibbs thinning and kept must be >= 1".into()));
    }
    let mut x = data.values.clone();
    let iters = cfg.burn_in + cfg.thinning * cfg.kept;
    let mut out = Vec::with_capacity(cfg.kept);
    for it in 1..=iters {
        let post = encode(params, &x, None)?;
        let eps = rng.normal_tensor(post.mu.shape());
        let z = reparam_sample(&post, &eps)?;
        let dec = decode(params, &z, None)?;
        for (j, xv) in x.data_mut().iter_mut().enumerate() {
            if data.mask.data()[j] == 0.0 {
                *xv = dec.mu.data()[j] + dec.sigma.data()[j] * rng.normal();
            }
        }
        if it > cfg.burn_in && (it - cfg.burn_in).is_multiple_of(cfg.thinning) {
            out.push(x.clone());
        }
    }
    Ok(out)
}

/// Draw `n` latent points from the weighted set (multinomial resampling).
pub fn resample_latents(z: &Tensor, weights: &[f64], n: usize, rng: &mut RngStream) -> Result<Tensor> {
    if z.rows() != weights.len() {
        return Err(Error::Dimension("one weight per draw required".into()));
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let idx: Vec<usize> = (0..n)
        .map(|_| {
            let u = rng.uniform() * acc;
            cdf.partition_point(|c| *c <= u).min(weights.len() - 1)
        })
        .collect();
    Ok(z.select_rows(&idx))
}
