//! Numerically robust standard-normal helpers used by the erf likelihood.

use statrs::function::erf::erfc;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Log density of the standard normal.
pub fn log_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * LN_2PI
}

/// Log CDF of the standard normal, stable for large negative arguments.
pub fn log_cdf(z: f64) -> f64 {
    if z > -30.0 {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Asymptotic tail expansion: Phi(z) ~ phi(z)/(-z) (1 - 1/z^2 + ...)
        let zi2 = 1.0 / (z * z);
        let mut term = 1.0;
        let mut series = 1.0;
        let mut k = 1.0;
        for _ in 0..8 {
            term *= -(2.0 * k - 1.0) * zi2;
            series += term;
            k += 1.0;
        }
        log_pdf(z) - (-z).ln() + series.ln()
    }
}

/// Inverse Mills ratio `phi(z) / Phi(z)`.
pub fn mills_ratio(z: f64) -> f64 {
    (log_pdf(z) - log_cdf(z)).exp()
}
