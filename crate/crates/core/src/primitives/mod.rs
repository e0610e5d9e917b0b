//! The four computational primitives (regularized solve, matrix-vector
//! multiply, log-determinant, posterior moments) behind a common backend
//! interface, realized twice: the linear-time SpInGP/Kalman route and a
//! dense cubic-time oracle used for verification.

mod dense;
mod spingp;

pub use dense::DenseOracle;
pub use spingp::StateSpaceBackend;

use crate::error::Result;
use crate::kalman::SiteParams;
use crate::likelihoods::Likelihood;

/// Posterior summary for fixed sites (b, W): `alpha = (I + W K)^{-1} b`,
/// centered latent means `K alpha`, marginal variances
/// `diag((K^{-1} + W)^{-1})`, and the log-determinant `ld_K(W)`.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub alpha: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub ld: f64,
}

/// Result of a single assumed-density-filtering sweep.
#[derive(Debug, Clone)]
pub struct AdfSweep {
    pub sites: SiteParams,
    pub logz0: Vec<f64>,
    pub clipped: usize,
}

/// Covariance-side computational interface shared by the state-space
/// implementation and the dense oracle. All latent quantities are
/// centered; the caller owns the mean function.
pub trait Backend {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `K r`.
    fn mvm_k(&self, r: &[f64]) -> Result<Vec<f64>>;

    /// `(K + W^{-1})^{-1} r` without forming `W^{-1}` (entries of `w`
    /// may be zero).
    fn solve_k(&self, w: &[f64], r: &[f64]) -> Result<Vec<f64>>;

    /// `log |I + W^{1/2} K W^{1/2}|`.
    fn ld_k(&self, w: &[f64]) -> Result<f64>;

    /// `d ld_K(W) / d W = diag((K^{-1} + W)^{-1})`.
    fn ld_k_dw(&self, w: &[f64]) -> Result<Vec<f64>>;

    /// Posterior summary under fixed sites.
    fn posterior(&self, sites: &SiteParams) -> Result<Posterior>;

    /// Single forward sweep with per-site moment matching. `y` holds raw
    /// targets, `mean` the prior mean at each step.
    fn adf_sweep(&self, lik: &Likelihood, y: &[f64], mean: &[f64], quad: usize) -> Result<AdfSweep>;

    /// Centered latent predictive moments at the test inputs.
    fn predict(&self, sites: &SiteParams, test_t: &[f64]) -> Result<Vec<(f64, f64)>>;
}
