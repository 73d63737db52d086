pub mod arb;
pub mod eval;
pub mod gradcheck;
pub mod impute;
pub mod sweep;
pub mod synth;
pub mod train;
