//! Variational autoencoders for distributional imputation of gridded
//! volatility data, with static-arbitrage checks and evaluation metrics.

pub mod arbcheck;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod imputer;
pub mod metrics;
pub mod nd;
pub mod objectives;
pub mod rng;
pub mod surfaces;
pub mod train;
pub mod vae;

pub use data::{read_matrix_csv, write_matrix_csv, MaskedData};
pub use error::{Error, Result};
pub use rng::RngStream;
