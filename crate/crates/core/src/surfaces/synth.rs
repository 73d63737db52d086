//! Seeded generators: Gaussian-mixture toys and synthetic vol surfaces.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::rng::RngStream;
use crate::surfaces::grid::{cell_index, Dataset, Surface, DELTAS, NUM_CELLS, NUM_DELTAS, NUM_TENORS, TENOR_YEARS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoGaussVariant {
    EqualVar,
    UnequalVar,
}

/// Mixture of Gaussians in the plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussMixtureSpec {
    pub means: Vec<[f64; 2]>,
    pub covs: Vec<[[f64; 2]; 2]>,
    pub weights: Vec<f64>,
}

impl GaussMixtureSpec {
    pub fn two_gauss(variant: TwoGaussVariant) -> Self {
        let a = match variant {
            TwoGaussVariant::EqualVar => 0.1,
            TwoGaussVariant::UnequalVar => 0.4,
        };
        Self {
            means: vec![[1.0, 1.0], [-1.0, -1.0]],
            covs: vec![[[a, 0.05], [0.05, 0.05]], [[a, -0.05], [-0.05, 0.05]]],
            weights: vec![0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 || self.covs.len() != k || self.weights.len() != k {
            return Err(Error::Parameter("mixture needs matching means, covs and weights".into()));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Parameter("mixture weights must be a probability vector".into()));
        }
        for c in &self.covs {
            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
            if c[0][1] != c[1][0] || c[0][0] <= 0.0 || det <= 0.0 {
                return Err(Error::Parameter(format!("covariance {c:?} is not symmetric positive-definite")));
            }
        }
        Ok(())
    }

    /// `n` draws plus the component label of each.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<(Tensor, Vec<usize>)> {
        self.validate()?;
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut j = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    j = i;
                    break;
                }
            }
            let c = self.covs[j];
            let l00 = c[0][0].sqrt();
            let l10 = c[1][0] / l00;
            let l11 = (c[1][1] - l10 * l10).sqrt();
            let (e0, e1) = (rng.normal(), rng.normal());
            data.push(self.means[j][0] + l00 * e0);
            data.push(self.means[j][1] + l10 * e0 + l11 * e1);
            labels.push(j);
        }
        Ok((Tensor::new(vec![n, 2], data)?, labels))
    }
}

pub fn gen_two_gauss(n: usize, variant: TwoGaussVariant, rng: &mut RngStream) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Parameter("n must be >= 1".into()));
    }
    Ok(GaussMixtureSpec::two_gauss(variant).sample(n, rng)?.0)
}

/// Ring-of-eight defaults: radius 4, component std 0.5, scaled to unit RMS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EightGaussSpec {
    pub radius: f64,
    pub std: f64,
    /// Global multiplier applied after sampling; `None` picks the one giving
    /// unit per-coordinate root-mean-square.
    pub scale: Option<f64>,
}

impl Default for EightGaussSpec {
    fn default() -> Self {
        Self { radius: 4.0, std: 0.5, scale: None }
    }
}

impl EightGaussSpec {
    pub fn effective_scale(&self) -> f64 {
        // E[x^2] per coordinate = radius^2 / 2 + std^2 over the ring
        self.scale.unwrap_or_else(|| 1.0 / (self.radius * self.radius / 2.0 + self.std * self.std).sqrt())
    }

    /// Centres after scaling, mode `j` at angle `2 pi j / 8`.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let s = self.effective_scale();
        (0..8)
            .map(|j| {
                let a = 2.0 * std::f64::consts::PI * j as f64 / 8.0;
                [s * self.radius * a.cos(), s * self.radius * a.sin()]
            })
            .collect()
    }
}

pub fn gen_eight_gauss_labeled(n: usize, spec: &EightGaussSpec, rng: &mut RngStream) -> Result<(Tensor, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Parameter("n must be >= 1".into()));
    }
    if !(spec.radius > 0.0 && spec.std > 0.0) {
        return Err(Error::Parameter("radius and std must be positive".into()));
    }
    let s = spec.effective_scale();
    let centers = spec.centers();
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let j = rng.below(8);
        data.push(centers[j][0] + s * spec.std * rng.normal());
        data.push(centers[j][1] + s * spec.std * rng.normal());
        labels.push(j);
    }
    Ok((Tensor::new(vec![n, 2], data)?, labels))
}

pub fn gen_eight_gauss(n: usize, spec: &EightGaussSpec, rng: &mut RngStream) -> Result<Tensor> {
    Ok(gen_eight_gauss_labeled(n, spec, rng)?.0)
}

/// Parameters of the synthetic surface process. Each daily factor follows a
/// mean-reverting AR(1): `f_t = m + phi (f_{t-1} - m) + s e_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGenParams {
    pub start: NaiveDate,
    /// Log ATM level at 3M.
    pub level: (f64, f64, f64),
    /// Term slope: ATM vol scales as `1 + slope * ln(T / 0.25)`.
    pub slope: (f64, f64, f64),
    /// Skew: vol changes by `skew * (2 delta - 1)` relative to ATM.
    pub skew: (f64, f64, f64),
    /// Curvature: relative vol change `curv * (2 delta - 1)^2`.
    pub curvature: (f64, f64, f64),
    /// Skew and curvature scale with `(0.25 / T)^smile_decay`.
    pub smile_decay: f64,
    /// Relative per-cell observation noise.
    pub noise: f64,
    pub min_vol: f64,
    pub max_vol: f64,
}

impl Default for SurfaceGenParams {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2012, 1, 2).expect("valid date"),
            level: (0.10f64.ln(), 0.985, 0.04),
            slope: (0.06, 0.97, 0.008),
            skew: (0.08, 0.97, 0.012),
            curvature: (0.12, 0.97, 0.012),
            smile_decay: 0.2,
            noise: 0.003,
            min_vol: 0.01,
            max_vol: 2.9,
        }
    }
}

fn ar1(prev: f64, (m, phi, s): (f64, f64, f64), rng: &mut RngStream) -> f64 {
    m + phi * (prev - m) + s * rng.normal()
}

/// Fully observed business-day surfaces from a smooth parametric smile.
pub fn gen_synthetic_surfaces(n_days: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_surfaces_with(n_days, seed, &SurfaceGenParams::default())
}

pub fn gen_synthetic_surfaces_with(n_days: usize, seed: u64, p: &SurfaceGenParams) -> Result<Dataset> {
    if n_days == 0 {
        return Err(Error::Parameter("n_days must be >= 1".into()));
    }
    let mut rng = RngStream::new(seed);
    let (mut level, mut slope, mut skew, mut curv) = (p.level.0, p.slope.0, p.skew.0, p.curvature.0);
    let mut date = p.start;
    let mut out = Vec::with_capacity(n_days);
    for _ in 0..n_days {
        while matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
            date += Duration::days(1);
        }
        level = ar1(level, p.level, &mut rng);
        slope = ar1(slope, p.slope, &mut rng);
        skew = ar1(skew, p.skew, &mut rng);
        curv = ar1(curv, p.curvature, &mut rng);
        let mut values = vec![0.0; NUM_CELLS];
        for (t, &tau) in TENOR_YEARS.iter().enumerate() {
            let atm = level.exp() * (1.0 + slope * (tau / 0.25).ln()).max(0.2);
            let decay = (0.25 / tau).powf(p.smile_decay);
            for (d, &delta) in DELTAS.iter().enumerate() {
                let x = 2.0 * delta - 1.0;
                let v = atm * (1.0 + decay * (skew * x + curv * x * x)) * (1.0 + p.noise * rng.normal());
                values[cell_index(t, d)] = v;
            }
        }
        // total variance at the middle delta must not decrease with tenor
        let mid = NUM_DELTAS / 2;
        for t in 1..NUM_TENORS {
            let prev = values[cell_index(t - 1, mid)].powi(2) * TENOR_YEARS[t - 1];
            let cur = values[cell_index(t, mid)].powi(2) * TENOR_YEARS[t];
            if cur < prev {
                values[cell_index(t, mid)] = (prev / TENOR_YEARS[t]).sqrt();
            }
        }
        for v in &mut values {
            *v = v.clamp(p.min_vol, p.max_vol);
        }
        out.push(Surface::new(date, values)?);
        date += Duration::days(1);
    }
    Dataset::new(out)
}
