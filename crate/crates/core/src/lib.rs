//! Cross-modality fusion transformer for paired RGB/thermal object detection,
//! with the small reverse-mode autodiff engine, detector, losses, metrics and
//! synthetic data it needs.

pub mod autodiff;
pub mod cft;
pub mod complexity;
pub mod data;
pub mod detector;
mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod parallel;
mod real;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CftError, Result};
pub use real::Real;
pub use tensor::Tensor;
