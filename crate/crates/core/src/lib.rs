//! Foreground-aware camouflaged image generation.
pub mod codec;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod tensor;

pub use error::{Error, Result};
