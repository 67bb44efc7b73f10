//! Pixelwise visibility-aware multi-view stereo at desk scale.

pub mod cascade;
pub mod config;
pub mod cost_volume;
pub mod error;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod model;
pub mod nn;
pub mod regularization;
pub mod selection;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
