//! Dense tensors, reverse-mode differentiation and optimisation.

pub mod func;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{AdamConfig, AdamState, LrSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
