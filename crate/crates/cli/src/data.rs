//! Turns a [`DataConfig`] into training and evaluation arrays.

use volimpute::data::read_matrix_csv;
use volimpute::nd::Tensor;
use volimpute::surfaces::grid::{Dataset, SplitBounds, Splits};
use volimpute::surfaces::synth::{gen_eight_gauss, gen_two_gauss, EightGaussSpec};
use volimpute::surfaces::{gen_synthetic_surfaces, load_csv, Standardizer, NUM_CELLS};
use volimpute::{MaskedData, RngStream};

use crate::config::{DataConfig, SplitSpec};
use crate::error::{CliError, CliResult};

pub enum Loaded {
    Surfaces { splits: Splits, standardizer: Standardizer },
    Matrix { values: Tensor },
}

impl Loaded {
    pub fn feature_dim(&self) -> usize {
        match self {
            Loaded::Surfaces { .. } => NUM_CELLS,
            Loaded::Matrix { values, .. } => values.cols(),
        }
    }

    pub fn train(&self) -> CliResult<MaskedData> {
        Ok(match self {
            Loaded::Surfaces { splits, standardizer } => standardizer.transform(&splits.train.surfaces)?,
            Loaded::Matrix { values, .. } => MaskedData::from_nan(values)?,
        })
    }

    pub fn validation(&self) -> CliResult<Option<MaskedData>> {
        Ok(match self {
            Loaded::Surfaces { splits, standardizer } if !splits.validation.is_empty() => {
                Some(standardizer.transform(&splits.validation.surfaces)?)
            }
            _ => None,
        })
    }

    pub fn standardizer(&self) -> Option<&Standardizer> {
        match self {
            Loaded::Surfaces { standardizer, .. } => Some(standardizer),
            Loaded::Matrix { .. } => None,
        }
    }
}

fn split(ds: &Dataset, spec: &SplitSpec) -> CliResult<Splits> {
    Ok(match spec {
        SplitSpec::Dates { train_end, validation_end } => {
            ds.split(&SplitBounds { train_end: *train_end, validation_end: *validation_end })
        }
        SplitSpec::Counts { train, validation, test } => ds.split_by_counts(*train, *validation, *test)?,
    })
}

fn surfaces(ds: Dataset, spec: &SplitSpec) -> CliResult<Loaded> {
    let splits = split(&ds, spec)?;
    if splits.train.is_empty() {
        return Err(CliError::Config("training split is empty".into()));
    }
    let standardizer = Standardizer::fit(&splits.train)?;
    Ok(Loaded::Surfaces { splits, standardizer })
}

/// Two-dimensional toy data keeps its natural scale (no standardisation).
pub fn load(cfg: &DataConfig) -> CliResult<Loaded> {
    match cfg {
        DataConfig::SurfaceCsv { path, split } => surfaces(load_csv(path)?, split),
        DataConfig::SyntheticSurfaces { days, seed, split } => surfaces(gen_synthetic_surfaces(*days, *seed)?, split),
        DataConfig::MatrixCsv { path } => {
            let (_, values) = read_matrix_csv(std::fs::File::open(path)?)?;
            Ok(Loaded::Matrix { values })
        }
        DataConfig::TwoGauss { variant, n, seed } => {
            Ok(Loaded::Matrix { values: gen_two_gauss(*n, *variant, &mut RngStream::new(*seed))? })
        }
        DataConfig::EightGauss { n, seed } => Ok(Loaded::Matrix {
            values: gen_eight_gauss(*n, &EightGaussSpec::default(), &mut RngStream::new(*seed))?,
        }),
    }
}
