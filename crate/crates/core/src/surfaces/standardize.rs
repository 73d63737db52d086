use serde::{Deserialize, Serialize};

use crate::data::MaskedData;
use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::rng::RngStream;
use crate::surfaces::grid::{Dataset, Surface, NUM_CELLS};

/// Per-cell z-scoring fitted on observed training cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot standardise on an empty training split".into()));
        }
        let mut mean = vec![0.0; NUM_CELLS];
        let mut std = vec![1.0; NUM_CELLS];
        for c in 0..NUM_CELLS {
            let vals: Vec<f64> = train
                .surfaces
                .iter()
                .filter(|s| s.mask[c])
                .map(|s| s.values[c])
                .collect();
            if vals.is_empty() {
                log::warn!("cell {c} never observed in training data; using mean 0, std 1");
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            if vals.iter().all(|x| *x == vals[0]) {
                mean[c] = vals[0];
                log::warn!("cell {c} is constant in training data; std clamped to 1");
                continue;
            }
            mean[c] = m;
            if v > 0.0 {
                std[c] = v.sqrt();
            } else {
                log::warn!("cell {c} is constant in training data; std clamped to 1");
            }
        }
        Ok(Self { mean, std })
    }

    pub fn forward(&self, cell: usize, v: f64) -> f64 {
        (v - self.mean[cell]) / self.std[cell]
    }

    pub fn inverse(&self, cell: usize, v: f64) -> f64 {
        v * self.std[cell] + self.mean[cell]
    }

    /// Variance in standardised units back to vol units.
    pub fn inverse_variance(&self, cell: usize, v: f64) -> f64 {
        v * self.std[cell] * self.std[cell]
    }

    pub fn transform(&self, surfaces: &[Surface]) -> Result<MaskedData> {
        let n = surfaces.len();
        let mut values = Vec::with_capacity(n * NUM_CELLS);
        let mut mask = Vec::with_capacity(n * NUM_CELLS);
        for s in surfaces {
            for c in 0..NUM_CELLS {
                if s.mask[c] {
                    values.push(self.forward(c, s.values[c]));
                    mask.push(1.0);
                } else {
                    values.push(0.0);
                    mask.push(0.0);
                }
            }
        }
        MaskedData::new(&Tensor::new(vec![n, NUM_CELLS], values)?, &Tensor::new(vec![n, NUM_CELLS], mask)?)
    }

    /// Row of standardised values back to vols.
    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(c, v)| self.inverse(c, *v)).collect()
    }
}

/// How many cells to hide per surface and which seed picks them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub rate: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn missing_count(&self) -> usize {
        (self.rate * NUM_CELLS as f64).round() as usize
    }
}

/// Hide `round(rate * 40)` cells chosen uniformly without replacement.
///
/// The choice depends on the spec seed and the surface date, so a dataset
/// masked with one spec gets a different pattern on each day.
pub fn apply_mask(surface: &Surface, spec: &MaskSpec) -> Result<Surface> {
    if !surface.is_complete() {
        return Err(Error::Data(format!("{}: masking needs a fully observed surface", surface.date)));
    }
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::Parameter(format!("missingness rate {} outside [0, 1]", spec.rate)));
    }
    let tag = surface.date.to_string().bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = RngStream::new(spec.seed).fork(tag);
    let mut out = surface.clone();
    for c in rng.sample_indices(NUM_CELLS, spec.missing_count()) {
        out.values[c] = f64::NAN;
        out.mask[c] = false;
    }
    Ok(out)
}

pub fn apply_mask_all(dataset: &Dataset, spec: &MaskSpec) -> Result<Dataset> {
    let surfaces = dataset.surfaces.iter().map(|s| apply_mask(s, spec)).collect::<Result<_>>()?;
    Ok(Dataset { surfaces })
}
