//! Matrix exponential via scaling-and-squaring with a Padé(13) approximant,
//! the block trick for its directional derivative, and a dense Lyapunov
//! solver for stationary state covariances.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Padé(13) numerator coefficients (Higham, scaling-and-squaring).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Largest 1-norm for which the Padé(13) approximant is used unscaled.
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    let mut max = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        max = max.max(s);
    }
    max
}

/// Matrix exponential `exp(X)` of a square matrix.
///
/// Uses scaling-and-squaring with the order-13 Padé approximant; accuracy
/// is close to machine precision for the small state matrices used here.
pub fn expm(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = x.nrows();
    if x.ncols() != d {
        return Err(Error::InvalidArgument("expm requires a square matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("expm requires finite entries".into()));
    }
    if d == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if d == 1 {
        return Ok(DMatrix::from_element(1, 1, x[(0, 0)].exp()));
    }

    let norm = one_norm(x);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as u32
    } else {
        0
    };
    let a = x / 2f64.powi(s as i32);

    let eye = DMatrix::<f64>::identity(d, d);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let w1 = &a6 * PADE13[13] + &a4 * PADE13[11] + &a2 * PADE13[9];
    let w2 = &a6 * &w1 + &a6 * PADE13[7] + &a4 * PADE13[5] + &a2 * PADE13[3] + &eye * PADE13[1];
    let u = &a * w2;

    let v1 = &a6 * PADE13[12] + &a4 * PADE13[10] + &a2 * PADE13[8];
    let v = &a6 * v1 + &a6 * PADE13[6] + &a4 * PADE13[4] + &a2 * PADE13[2] + &eye * PADE13[0];

    let num = &v + &u;
    let den = &v - &u;
    let mut r = den
        .lu()
        .solve(&num)
        .ok_or_else(|| Error::InvalidArgument("expm Pade denominator is singular".into()))?;

    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Matrix exponential together with its directional derivative.
///
/// Exponentiating the doubled block matrix `[[X, 0], [dX, X]]` yields
/// `[[exp(X), 0], [d exp(X), exp(X)]]`; returns `(exp(X), d exp(X))`.
pub fn expm_deriv(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = x.nrows();
    if dx.nrows() != d || dx.ncols() != d || x.ncols() != d {
        return Err(Error::InvalidArgument("expm_deriv shape mismatch".into()));
    }
    let mut big = DMatrix::<f64>::zeros(2 * d, 2 * d);
    big.view_mut((0, 0), (d, d)).copy_from(x);
    big.view_mut((d, d), (d, d)).copy_from(x);
    big.view_mut((d, 0), (d, d)).copy_from(dx);
    let e = expm(&big)?;
    let ex = e.view((0, 0), (d, d)).into_owned();
    let dex = e.view((d, 0), (d, d)).into_owned();
    Ok((ex, dex))
}

/// Solve the continuous Lyapunov equation `F P + P F^T + Sigma = 0`.
///
/// `F` must be Hurwitz (all eigenvalues with negative real part) for a
/// stationary solution to exist. Solved via the Kronecker linearization,
/// which is exact and cheap for the small state dimensions used here.
pub fn lyapunov_solve(f: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = f.nrows();
    if f.ncols() != d || sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::InvalidArgument("lyapunov_solve shape mismatch".into()));
    }
    let eigs = f.clone().complex_eigenvalues();
    if eigs.iter().any(|l| l.re >= 0.0) {
        return Err(Error::InvalidArgument(
            "no stationary solution: feedback matrix is not Hurwitz".into(),
        ));
    }

    // (I (x) F + F (x) I) vec(P) = -vec(Sigma)
    let mut m = DMatrix::<f64>::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                // I (x) F: block (j, j) holds F
                m[(j * d + i, j * d + k)] += f[(i, k)];
                // F (x) I: entry couples vec index (j, i) across column blocks
                m[(j * d + i, k * d + i)] += f[(j, k)];
            }
        }
    }
    let rhs = nalgebra::DVector::<f64>::from_fn(d * d, |idx, _| -sigma[(idx % d, idx / d)]);
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("singular Lyapunov system".into()))?;
    let mut p = DMatrix::<f64>::from_fn(d, d, |i, j| sol[j * d + i]);
    super::symmetrize(&mut p);
    Ok(p)
}
