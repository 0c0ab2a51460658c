//! A lightweight dynamic convolutional network for single-image
//! super-resolution, with its own tensor, autodiff and training stack.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{DsrNet, ModelConfig, Variant};
pub use rng::Rng;
pub use tensor::{DType, Element, Shape, Tensor};
