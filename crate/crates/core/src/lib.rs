pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod guidance;
pub mod imaging;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
