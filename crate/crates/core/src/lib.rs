//! Conditional denoising diffusion for toy super-resolution, with standard
//! DDPM training, diffusion rectification (DRM) and the estimation-adaptive
//! DREAM objective.

pub mod data;
pub mod denoiser;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
