pub mod cli;
pub mod config;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod migration;
pub mod params;
pub mod reference;
pub mod resampling;
pub mod selftest;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use image::ImageBuffer;
