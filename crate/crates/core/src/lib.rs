//! Contrastive proposal extension for weakly supervised object detection.

pub mod contrast;
pub mod encoder;
pub mod error;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod mil;
pub mod model;
pub mod tensor;

pub use error::{CpeError, Result};
