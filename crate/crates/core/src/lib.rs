//! Style-conditioned radiance fields with 2D upsampling.

pub mod adversary;
pub mod camera;
pub mod config;
pub mod error;
pub mod evalsuite;
pub mod field;
pub mod generator;
pub mod imageio;
pub mod mcubes;
mod mcubes_tables;
pub mod params;
pub mod renderer;
pub mod schedule;
pub mod styles;
pub mod tape;
pub mod trainer;
pub mod upsampler;

pub use error::{Error, Result};
