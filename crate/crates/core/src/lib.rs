pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pruning;
pub mod rng;
pub mod similarity;
pub mod tape;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
