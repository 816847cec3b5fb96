//! Latent-diffusion shape completion over truncated signed distance grids.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod vec3;
pub mod vqvae;

pub use error::{Error, Result};
pub use grid::TsdfGrid;
