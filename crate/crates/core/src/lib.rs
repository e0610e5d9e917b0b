//! State-space Gaussian process inference for one-dimensional inputs.

pub mod discretize;
pub mod error;
pub mod inference;
pub mod kalman;
pub mod kernels;
pub mod learning;
pub mod likelihoods;
pub mod primitives;
pub mod recursions;
pub mod linalg;

pub use error::{Error, Result};
