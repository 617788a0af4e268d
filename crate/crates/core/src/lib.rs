//! Residual CNN denoising trained by classical and learned optimizers.

pub mod autodiff;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
pub mod nn;
pub mod tasks;
pub mod optim;
pub mod meta;
pub mod image;
pub mod metrics;
pub mod denoiser;
pub mod selfcheck;
