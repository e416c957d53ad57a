//! DSM to DTM conversion with a confidence-gated conditional diffusion model,
//! prior-guided tiling for large rasters, and a synthetic terrain generator.

pub mod ablation;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod priostitch;
pub mod raster;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
