//! Small-matrix numerical kernels: matrix exponential (with directional
//! derivative), Lyapunov solve, and symmetric block-tridiagonal
//! factorization, solve, and selected inversion.

mod btd;
mod expm;

pub use btd::{btd_factor, BtdFactor, BtdMatrix, DEFAULT_RIDGE};
pub use expm::{expm, expm_deriv, lyapunov_solve};

use nalgebra::DMatrix;

/// Symmetrize in place: `m <- (m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
