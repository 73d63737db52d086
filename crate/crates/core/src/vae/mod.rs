//! Encoder/decoder networks, noise models and sampling.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod params;

pub use checkpoint::Checkpoint;
pub use config::{Architecture, NoiseModel, VaeConfig};
pub use model::{
    decode, decode_on, encode, encode_on, kl_standard_normal, reparam_sample, sample_generative,
    std_normal_log_density, DecoderOutput, LatentPosterior,
};
pub use params::{is_encoder, is_generative, Bound, VaeParams};
