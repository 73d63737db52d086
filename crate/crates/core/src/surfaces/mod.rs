//! Vol-surface data model, ingestion, masking, generators and Black conversions.

pub mod black;
pub mod grid;
pub mod io;
pub mod standardize;
pub mod synth;

pub use black::{bs_call, delta_to_strike, strike_to_delta};
pub use grid::{Dataset, SplitBounds, Splits, Surface, DELTAS, NUM_CELLS, TENOR_LABELS, TENOR_YEARS};
pub use io::{load_csv, read_csv, save_csv, write_csv, SURFACE_HEADER};
pub use standardize::{apply_mask, apply_mask_all, MaskSpec, Standardizer};
pub use synth::{
    gen_eight_gauss, gen_synthetic_surfaces, gen_two_gauss, EightGaussSpec, GaussMixtureSpec, SurfaceGenParams,
    TwoGaussVariant,
};
