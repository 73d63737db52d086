//! Evaluation: bps MAE, negative IWAE bounds, variance calibration,
//! posterior-collapse statistics and gradient-norm diagnostics.

use serde::{Deserialize, Serialize};

use crate::arbcheck::{sample_arb_rate, ArbRate};
use crate::data::MaskedData;
use crate::error::{Error, Result};
use crate::imputer::{impute_all, refit_encoder, ImputationConfig, RefitMode};
use crate::nd::Tape;
use crate::objectives::{build_loss, draw_eps, iwae_eval, Objective};
use crate::rng::RngStream;
use crate::surfaces::grid::{cell_coords, Dataset, Surface, NUM_CELLS, NUM_TENORS};
use crate::surfaces::{apply_mask_all, MaskSpec, Standardizer};
use crate::vae::{encode, VaeParams};

pub const BPS: f64 = 1e4;

/// Mean |imputed - truth| over selected cells, in basis points of vol.
pub fn mae_bps(imputed: &[f64], truth: &[f64], select: &[bool]) -> Result<f64> {
    if imputed.len() != truth.len() || truth.len() != select.len() {
        return Err(Error::Dimension("imputed, truth and selector lengths differ".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..truth.len() {
        if select[i] {
            sum += (imputed[i] - truth[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("MAE over an empty cell selection".into()));
    }
    Ok(sum / n as f64 * BPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Mean negative IWAE bound per row, optionally after refitting the encoder
/// on `data` itself.
pub fn neg_elbo_eval(params: &VaeParams, data: &MaskedData, refit: Option<&ImputationConfig>, k: usize, seed: u64) -> Result<Estimate> {
    let fitted;
    let p = match refit {
        Some(cfg) if cfg.refit == RefitMode::Encoder => {
            fitted = refit_encoder(params, data, None, cfg)?;
            &fitted
        }
        _ => params,
    };
    let (mean, std_error) = iwae_eval(p, data, k, &mut RngStream::new(seed))?;
    Ok(Estimate { mean, std_error })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Equal widths in log predicted variance.
    Log,
    /// Equal counts.
    Quantile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_pred_var: f64,
    pub mean_sq_err: f64,
    pub std_err: f64,
    /// `(mean_sq_err - mean_pred_var) / std_err`; `None` when the standard
    /// error is zero but the means differ.
    pub normalized_distance: Option<f64>,
}

/// Bins points by predicted variance and compares the mean squared error in
/// each bin with the mean prediction. Bins with fewer than two points are
/// merged into a neighbour.
pub fn variance_calibration(pred_var: &[f64], sq_err: &[f64], n_bins: usize, binning: Binning) -> Result<Vec<CalibrationBin>> {
    if n_bins < 2 {
        return Err(Error::Parameter("need at least 2 bins".into()));
    }
    if pred_var.len() != sq_err.len() {
        return Err(Error::Dimension("pred_var and sq_err lengths differ".into()));
    }
    if pred_var.len() < 2 {
        return Err(Error::UndefinedMetric("calibration needs at least 2 points".into()));
    }
    if pred_var.iter().chain(sq_err).any(|v| !v.is_finite()) || pred_var.iter().any(|v| *v <= 0.0) {
        return Err(Error::Parameter("predicted variances must be positive and finite".into()));
    }
    let mut order: Vec<usize> = (0..pred_var.len()).collect();
    order.sort_by(|a, b| pred_var[*a].total_cmp(&pred_var[*b]));
    let n = order.len();
    // group sorted positions into bins
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    match binning {
        Binning::Quantile => {
            for (r, &i) in order.iter().enumerate() {
                groups[r * n_bins / n].push(i);
            }
        }
        Binning::Log => {
            let lo = pred_var[order[0]].ln();
            let hi = pred_var[order[n - 1]].ln();
            let w = (hi - lo) / n_bins as f64;
            for &i in &order {
                let b = if w > 0.0 { (((pred_var[i].ln() - lo) / w) as usize).min(n_bins - 1) } else { 0 };
                groups[b].push(i);
            }
        }
    }
    let mut merged: Vec<Vec<usize>> = Vec::new();
    let mut carry: Vec<usize> = Vec::new();
    for g in groups {
        carry.extend(g);
        if carry.len() >= 2 {
            merged.push(std::mem::take(&mut carry));
        }
    }
    if !carry.is_empty() {
        merged.last_mut().expect("at least one bin of two points").extend(carry);
    }
    Ok(merged
        .into_iter()
        .map(|idx| {
            let c = idx.len() as f64;
            let mp = idx.iter().map(|&i| pred_var[i]).sum::<f64>() / c;
            let ms = idx.iter().map(|&i| sq_err[i]).sum::<f64>() / c;
            let var = idx.iter().map(|&i| (sq_err[i] - ms).powi(2)).sum::<f64>() / (c - 1.0);
            let se = (var / c).sqrt();
            let diff = ms - mp;
            let nd = if diff == 0.0 {
                Some(0.0)
            } else if se > 0.0 {
                Some(diff / se)
            } else {
                None
            };
            CalibrationBin {
                lo: idx.iter().map(|&i| pred_var[i]).fold(f64::INFINITY, f64::min),
                hi: idx.iter().map(|&i| pred_var[i]).fold(f64::NEG_INFINITY, f64::max),
                count: idx.len(),
                mean_pred_var: mp,
                mean_sq_err: ms,
                std_err: se,
                normalized_distance: nd,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseStats {
    /// Per-dimension variance of the posterior mean, in latent order.
    pub variances: Vec<f64>,
    /// Latent dimensions sorted by descending variance.
    pub order: Vec<usize>,
    /// Cumulative fraction of total variance over `order`.
    pub cumulative: Vec<f64>,
    pub threshold: f64,
    pub active: usize,
}

/// Collapse statistics from posterior means, one row per input.
pub fn collapse_from_means(mu: &crate::nd::Tensor, threshold: f64) -> Result<CollapseStats> {
    let (n, d) = (mu.rows(), mu.cols());
    if n == 0 {
        return Err(Error::UndefinedMetric("collapse statistics need at least one row".into()));
    }
    let mut variances = vec![0.0; d];
    for (j, v) in variances.iter_mut().enumerate() {
        let m = (0..n).map(|i| mu.at(i, j)).sum::<f64>() / n as f64;
        *v = (0..n).map(|i| (mu.at(i, j) - m).powi(2)).sum::<f64>() / n as f64;
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| variances[*b].total_cmp(&variances[*a]).then(a.cmp(b)));
    let total: f64 = variances.iter().sum();
    let mut acc = 0.0;
    let cumulative = order
        .iter()
        .map(|&j| {
            acc += variances[j];
            if total > 0.0 {
                acc / total
            } else {
                0.0
            }
        })
        .collect();
    let active = variances.iter().filter(|v| **v > threshold).count();
    Ok(CollapseStats { variances, order, cumulative, threshold, active })
}

pub fn posterior_collapse(params: &VaeParams, data: &MaskedData, threshold: f64) -> Result<CollapseStats> {
    collapse_from_means(&encode(params, &data.values, None)?.mu, threshold)
}

/// Norms of the batch-mean gradients of the reconstruction term and of the
/// KL term with respect to the encoder mean, averaged over batches.
pub fn grad_norm_diag(params: &VaeParams, batches: &[MaskedData], rng: &mut RngStream) -> Result<(f64, f64)> {
    if batches.is_empty() {
        return Err(Error::Parameter("need at least one batch".into()));
    }
    let obj = Objective::Elbo { m: 1 };
    let (mut rsum, mut ksum) = (0.0, 0.0);
    for b in batches {
        let mut tape = Tape::new();
        // weights must be tracked for gradients to reach mu_z
        let bound = params.bind(&mut tape, &|_| true);
        let eps = draw_eps(b.rows(), &obj, params.config.latent_dim, rng);
        let v = build_loss(&mut tape, params, &bound, b, &obj, &eps, None)?;
        let r = tape.sum(v.recon)?;
        let k = tape.sum(v.kl)?;
        let norm = |out| -> Result<f64> {
            let g = tape.backward(out)?;
            let gm = g.get(v.mu_z).cloned().unwrap_or_else(|| crate::nd::Tensor::zeros(tape.value(v.mu_z).shape()));
            let (n, d) = (gm.rows(), gm.cols());
            Ok((0..d).map(|j| ((0..n).map(|i| gm.at(i, j)).sum::<f64>() / n as f64).powi(2)).sum::<f64>().sqrt())
        };
        rsum += norm(r)?;
        ksum += norm(k)?;
    }
    let nb = batches.len() as f64;
    Ok((rsum / nb, ksum / nb))
}

/// Imputed vols for one surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputedSurface {
    pub date: chrono::NaiveDate,
    pub observed: Vec<bool>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub ess: f64,
}

/// Imputes every surface (missing cells are those with `mask == false`),
/// refitting the encoder on the observed cells first when configured.
pub fn impute_surfaces(params: &VaeParams, standardizer: &Standardizer, surfaces: &[Surface], cfg: &ImputationConfig) -> Result<Vec<ImputedSurface>> {
    if params.config.feature_dim != NUM_CELLS {
        return Err(Error::Schema(format!("model has {} features, surfaces have {NUM_CELLS}", params.config.feature_dim)));
    }
    let data = standardizer.transform(surfaces)?;
    let refit;
    let p = if cfg.refit == RefitMode::Encoder {
        refit = refit_encoder(params, &data, None, cfg)?;
        &refit
    } else {
        params
    };
    let res = impute_all(p, &data, cfg.n_samples, cfg.seed)?;
    Ok(surfaces
        .iter()
        .zip(res)
        .map(|(s, r)| ImputedSurface {
            date: s.date,
            observed: s.mask.clone(),
            mean: standardizer.inverse_row(&r.mean),
            variance: r.variance.iter().enumerate().map(|(c, v)| standardizer.inverse_variance(c, *v)).collect(),
            ess: r.ess,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rates: Vec<f64>,
    pub mask_seed: u64,
    pub imputation: ImputationConfig,
    pub iwae_k: usize,
    pub calibration_bins: usize,
    pub binning: Binning,
    pub collapse_threshold: f64,
    /// Generated surfaces for the arbitrage rate; 0 skips it.
    pub arb_samples: usize,
    pub forward: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rates: (1..=9).map(|i| i as f64 / 10.0).collect(),
            mask_seed: 0,
            imputation: ImputationConfig::default(),
            iwae_k: 50,
            calibration_bins: 12,
            binning: Binning::Log,
            collapse_threshold: 0.5,
            arb_samples: 0,
            forward: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub rate: f64,
    pub mae_missing_bps: f64,
    pub mae_observed_bps: f64,
    /// Missing-cell MAE per tenor; `None` where no cell of that tenor was hidden.
    pub mae_missing_by_tenor_bps: Vec<Option<f64>>,
    pub mean_ess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rates: Vec<RateResult>,
    pub neg_elbo_train: Option<Estimate>,
    pub neg_elbo_validation: Option<Estimate>,
    pub neg_elbo_validation_refit: Option<Estimate>,
    /// Missing-cell calibration pooled over all rates, in vol units.
    pub calibration: Vec<CalibrationBin>,
    pub collapse: Option<CollapseStats>,
    pub arb_rate: Option<ArbRate>,
}

/// Masks each complete test surface at every rate, imputes, and scores.
pub fn evaluate_rates(params: &VaeParams, standardizer: &Standardizer, test: &Dataset, cfg: &EvalConfig) -> Result<(Vec<RateResult>, Vec<(f64, f64)>)> {
    let mut out = Vec::with_capacity(cfg.rates.len());
    let mut calib = Vec::new();
    for (ri, &rate) in cfg.rates.iter().enumerate() {
        let masked = apply_mask_all(test, &MaskSpec { rate, seed: cfg.mask_seed })?;
        let icfg = ImputationConfig { seed: cfg.imputation.seed.wrapping_add(ri as u64), ..cfg.imputation.clone() };
        let imp = impute_surfaces(params, standardizer, &masked.surfaces, &icfg)?;
        let (mut pred, mut truth, mut miss) = (Vec::new(), Vec::new(), Vec::new());
        for (s, r) in test.surfaces.iter().zip(&imp) {
            pred.extend_from_slice(&r.mean);
            truth.extend_from_slice(&s.values);
            miss.extend(r.observed.iter().map(|o| !o));
            for c in 0..NUM_CELLS {
                if !r.observed[c] && r.variance[c] > 0.0 {
                    calib.push((r.variance[c], (r.mean[c] - s.values[c]).powi(2)));
                }
            }
        }
        let obs: Vec<bool> = miss.iter().map(|m| !m).collect();
        let by_tenor = (0..NUM_TENORS)
            .map(|t| {
                let sel: Vec<bool> = miss.iter().enumerate().map(|(i, m)| *m && cell_coords(i % NUM_CELLS).0 == t).collect();
                mae_bps(&pred, &truth, &sel).ok()
            })
            .collect();
        out.push(RateResult {
            rate,
            mae_missing_bps: mae_bps(&pred, &truth, &miss)?,
            mae_observed_bps: mae_bps(&pred, &truth, &obs).unwrap_or(0.0),
            mae_missing_by_tenor_bps: by_tenor,
            mean_ess: imp.iter().map(|r| r.ess).sum::<f64>() / imp.len().max(1) as f64,
        });
    }
    Ok((out, calib))
}

/// Full report on complete train/validation/test surfaces.
pub fn eval_report(params: &VaeParams, standardizer: &Standardizer, train: &Dataset, validation: &Dataset, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let (rates, calib) = evaluate_rates(params, standardizer, test, cfg)?;
    let seed = cfg.imputation.seed;
    let nonempty = |d: &Dataset| -> Result<Option<MaskedData>> {
        if d.is_empty() {
            Ok(None)
        } else {
            Ok(Some(standardizer.transform(&d.surfaces)?))
        }
    };
    let tr = nonempty(train)?;
    let va = nonempty(validation)?;
    let neg_elbo_train = tr.as_ref().map(|d| neg_elbo_eval(params, d, None, cfg.iwae_k, seed)).transpose()?;
    let neg_elbo_validation = va.as_ref().map(|d| neg_elbo_eval(params, d, None, cfg.iwae_k, seed)).transpose()?;
    let refit_cfg = ImputationConfig { refit: RefitMode::Encoder, ..cfg.imputation.clone() };
    let neg_elbo_validation_refit = match (&va, cfg.imputation.refit) {
        (Some(d), RefitMode::Encoder) => Some(neg_elbo_eval(params, d, Some(&refit_cfg), cfg.iwae_k, seed)?),
        _ => None,
    };
    let calibration = if calib.len() >= 2 {
        let (pv, se): (Vec<f64>, Vec<f64>) = calib.into_iter().unzip();
        variance_calibration(&pv, &se, cfg.calibration_bins, cfg.binning)?
    } else {
        Vec::new()
    };
    let collapse = match tr.as_ref().or(va.as_ref()) {
        Some(d) => Some(posterior_collapse(params, d, cfg.collapse_threshold)?),
        None => None,
    };
    let arb_rate = if cfg.arb_samples > 0 {
        Some(sample_arb_rate(params, standardizer, cfg.arb_samples, cfg.forward, seed)?)
    } else {
        None
    };
    Ok(EvalReport { rates, neg_elbo_train, neg_elbo_validation, neg_elbo_validation_refit, calibration, collapse, arb_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::Tensor;
    use crate::vae::{Architecture, NoiseModel, VaeConfig};

    #[test]
    fn mae_units() {
        assert_eq!(mae_bps(&[0.1, 0.2], &[0.1, 0.2], &[true, true]).unwrap(), 0.0);
        assert!((mae_bps(&[0.101], &[0.1], &[true]).unwrap() - 10.0).abs() < 1e-9);
        assert!((mae_bps(&[0.101, 0.203, 9.0], &[0.1, 0.2, 0.0], &[true, true, false]).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(mae_bps(&[0.1], &[0.1], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn exact_predictions_have_zero_distance() {
        let pv: Vec<f64> = (1..=200).map(|i| 0.01 * i as f64).collect();
        for binning in [Binning::Log, Binning::Quantile] {
            let bins = variance_calibration(&pv, &pv, 12, binning).unwrap();
            assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 200);
            assert!(bins.iter().all(|b| b.normalized_distance == Some(0.0)));
        }
    }

    #[test]
    fn sparse_bins_are_merged() {
        let pv = [1.0, 1.0, 1.0, 1000.0, 2.0];
        let bins = variance_calibration(&pv, &[1.0; 5], 4, Binning::Log).unwrap();
        assert!(bins.iter().all(|b| b.count >= 2));
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 5);
    }

    #[test]
    fn live_dims_counted() {
        let mut rng = RngStream::new(3);
        let n = 2000;
        let mut data = Vec::with_capacity(n * 64);
        for _ in 0..n {
            for j in 0..64 {
                data.push(if j < 8 { rng.normal() } else { 1e-3 * rng.normal() });
            }
        }
        let mu = Tensor::matrix(n, 64, data).unwrap();
        let s = collapse_from_means(&mu, 0.5).unwrap();
        assert_eq!(s.active, 8);
        assert!(s.cumulative[7] > 0.999);
        let tot: f64 = s.variances.iter().sum();
        let rev: Vec<usize> = (0..n).rev().collect();
        let s2 = collapse_from_means(&mu.select_rows(&rev), 0.5).unwrap();
        assert!((s2.variances.iter().sum::<f64>() - tot).abs() < 1e-9);
        assert_eq!(s2.active, 8);
    }

    #[test]
    fn zero_mu_head_collapses_everything() {
        let cfg = VaeConfig { feature_dim: 3, latent_dim: 4, hidden_dim: 8, num_blocks: 1, dropout: 0.0, architecture: Architecture::Mlp, noise_model: NoiseModel::LearnableScalar, iwae_k: 1 };
        let mut p = VaeParams::init(&cfg, &mut RngStream::new(0)).unwrap();
        p.set("enc.mu.w", Tensor::zeros(&[4, 8])).unwrap();
        p.set("enc.mu.b", Tensor::zeros(&[4])).unwrap();
        let x = MaskedData::fully_observed(RngStream::new(1).normal_tensor(&[50, 3])).unwrap();
        let s = posterior_collapse(&p, &x, 0.5).unwrap();
        assert!(s.variances.iter().all(|v| *v == 0.0));
        assert_eq!(s.active, 0);
        // posterior pinned at the prior: KL gradient vanishes
        let (_, kl) = grad_norm_diag(&p, &[x], &mut RngStream::new(2)).unwrap();
        assert!(kl.abs() < 1e-12);
    }
}
