//! Window-based linear multi-head self-attention and a dual-path
//! segmentation network for building footprint extraction.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
