//! SNeurodCNN: a two-block convolutional network for MCI vs AD slice
//! classification, written from scratch on `f64` tensors, with Adam
//! training, early stopping, the standard binary metrics and Grad-CAM maps.

pub mod cli;
pub mod data;
pub mod error;
pub mod explain;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Prng, Tensor};
