//! Fixed 8-tenor × 5-delta layout. Cell index is `tenor * 5 + delta`.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENOR_LABELS: [&str; 8] = ["1W", "1M", "2M", "3M", "6M", "9M", "1Y", "3Y"];
pub const TENOR_YEARS: [f64; 8] = [7.0 / 365.0, 1.0 / 12.0, 1.0 / 6.0, 0.25, 0.5, 0.75, 1.0, 3.0];
/// Forward call deltas.
pub const DELTAS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];
pub const NUM_TENORS: usize = 8;
pub const NUM_DELTAS: usize = 5;
pub const NUM_CELLS: usize = NUM_TENORS * NUM_DELTAS;

pub fn cell_index(tenor: usize, delta: usize) -> usize {
    tenor * NUM_DELTAS + delta
}

pub fn cell_coords(index: usize) -> (usize, usize) {
    (index / NUM_DELTAS, index % NUM_DELTAS)
}

pub fn tenor_index(label: &str) -> Option<usize> {
    TENOR_LABELS.iter().position(|t| *t == label)
}

pub fn delta_index(delta: f64) -> Option<usize> {
    DELTAS.iter().position(|d| (d - delta).abs() < 1e-9)
}

/// One day's grid. Missing cells hold NaN and have `mask == false`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub date: NaiveDate,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Surface {
    pub fn new(date: NaiveDate, values: Vec<f64>) -> Result<Self> {
        if values.len() != NUM_CELLS {
            return Err(Error::Dimension(format!("surface needs {NUM_CELLS} cells, got {}", values.len())));
        }
        let mask = values.iter().map(|v| !v.is_nan()).collect();
        let s = Self { date, values, mask };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != NUM_CELLS || self.mask.len() != NUM_CELLS {
            return Err(Error::Dimension("surface must have 40 values and 40 mask flags".into()));
        }
        for (i, (v, m)) in self.values.iter().zip(&self.mask).enumerate() {
            let (t, d) = cell_coords(i);
            if *m && !(*v > 0.0 && v.is_finite()) {
                return Err(Error::Data(format!(
                    "{}: vol {v} at ({}, {}) must be positive",
                    self.date, TENOR_LABELS[t], DELTAS[d]
                )));
            }
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|m| *m)
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Surfaces sorted by date.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub surfaces: Vec<Surface>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitBounds {
    /// Last training day (inclusive).
    pub train_end: NaiveDate,
    /// Last validation day (inclusive); later days are test.
    pub validation_end: NaiveDate,
}

impl Default for SplitBounds {
    fn default() -> Self {
        Self {
            train_end: NaiveDate::from_ymd_opt(2020, 2, 29).expect("valid date"),
            validation_end: NaiveDate::from_ymd_opt(2020, 12, 31).expect("valid date"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(mut surfaces: Vec<Surface>) -> Result<Self> {
        surfaces.sort_by_key(|s| s.date);
        if let Some(w) = surfaces.windows(2).find(|w| w[0].date == w[1].date) {
            return Err(Error::Data(format!("duplicate date {}", w[0].date)));
        }
        for s in &surfaces {
            s.validate()?;
        }
        Ok(Self { surfaces })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn split(&self, bounds: &SplitBounds) -> Splits {
        let mut out = Splits::default();
        for s in &self.surfaces {
            let part = if s.date <= bounds.train_end {
                &mut out.train
            } else if s.date <= bounds.validation_end {
                &mut out.validation
            } else {
                &mut out.test
            };
            part.surfaces.push(s.clone());
        }
        out
    }

    /// Consecutive date blocks of the given sizes.
    pub fn split_by_counts(&self, train: usize, validation: usize, test: usize) -> Result<Splits> {
        if train + validation + test > self.len() {
            return Err(Error::Data(format!(
                "requested {} days but dataset has {}",
                train + validation + test,
                self.len()
            )));
        }
        let s = &self.surfaces;
        Ok(Splits {
            train: Dataset { surfaces: s[..train].to_vec() },
            validation: Dataset { surfaces: s[train..train + validation].to_vec() },
            test: Dataset { surfaces: s[train + validation..train + validation + test].to_vec() },
        })
    }
}
