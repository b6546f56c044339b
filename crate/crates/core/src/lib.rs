//! Learned feature compression for split computing.

pub mod autodiff;
pub mod coder;
pub mod data;
pub mod entropy_model;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod quantizer;
pub mod report;
pub mod split_runtime;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
