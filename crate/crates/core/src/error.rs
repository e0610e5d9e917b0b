//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, linear algebra, and inference.
#[derive(Debug, Error)]
pub enum Error {
    /// Requested covariance function is not implemented.
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),

    /// Inference scheme cannot be used with the given likelihood.
    #[error("unsupported inference: {0}")]
    UnsupportedInference(String),

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An observation lies outside the likelihood support.
    #[error("observation outside likelihood support: {0}")]
    Domain(String),

    /// Block factorization failed even after ridge repair.
    #[error("factorization failed at block {block}: {msg}")]
    Factorization { block: usize, msg: String },

    /// A recursion produced a non-viable quantity at a given step.
    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    /// An iterative scheme ran out of iterations.
    #[error("no convergence after {iters} iterations ({msg})")]
    NonConvergence { iters: usize, msg: String },

    /// Malformed input data.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// I/O failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
