//! Symmetric block-tridiagonal factorization (block Cholesky forward
//! sweep), solve, and selected inversion of the block diagonal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default ridge multiplier applied on factorization failure.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Symmetric block-tridiagonal matrix with `n+1` diagonal blocks of size
/// `d x d` and `n` sub-diagonal blocks (the super-diagonal is implied by
/// symmetry).
#[derive(Debug, Clone)]
pub struct BtdMatrix {
    /// Diagonal blocks `D_0 .. D_n`.
    pub diag: Vec<DMatrix<f64>>,
    /// Sub-diagonal blocks; `sub[i]` couples block row `i+1` to column `i`.
    pub sub: Vec<DMatrix<f64>>,
}

impl BtdMatrix {
    pub fn block_dim(&self) -> usize {
        self.diag[0].nrows()
    }

    pub fn nblocks(&self) -> usize {
        self.diag.len()
    }

    /// Assemble the dense matrix; intended for oracle comparisons at small n.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.block_dim();
        let n = self.nblocks();
        let mut m = DMatrix::zeros(n * d, n * d);
        for (i, b) in self.diag.iter().enumerate() {
            m.view_mut((i * d, i * d), (d, d)).copy_from(b);
        }
        for (i, b) in self.sub.iter().enumerate() {
            m.view_mut(((i + 1) * d, i * d), (d, d)).copy_from(b);
            m.view_mut((i * d, (i + 1) * d), (d, d)).copy_from(&b.transpose());
        }
        m
    }
}

/// Block Cholesky factorization `M = L L^T` where `L` is block
/// lower-bidiagonal: lower-triangular diagonal blocks `l[i]` and dense
/// sub-diagonal blocks `c[i]`.
#[derive(Debug, Clone)]
pub struct BtdFactor {
    l: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    d: usize,
}

impl BtdFactor {
    pub fn nblocks(&self) -> usize {
        self.l.len()
    }

    pub fn block_dim(&self) -> usize {
        self.d
    }

    /// Sum of log-diagonal entries of `L`, i.e. `log det(M) / 2`.
    pub fn half_log_det(&self) -> f64 {
        self.l
            .iter()
            .map(|l| (0..self.d).map(|i| l[(i, i)].ln()).sum::<f64>())
            .sum()
    }

    /// Recompose `M` blockwise; used by reassembly checks.
    pub fn reassemble(&self) -> BtdMatrix {
        let n = self.l.len();
        let mut diag = Vec::with_capacity(n);
        let mut sub = Vec::with_capacity(n - 1);
        for i in 0..n {
            let mut b = &self.l[i] * self.l[i].transpose();
            if i > 0 {
                b += &self.c[i - 1] * self.c[i - 1].transpose();
            }
            diag.push(b);
            if i + 1 < n {
                sub.push(&self.c[i] * self.l[i].transpose());
            }
        }
        BtdMatrix { diag, sub }
    }

    /// Solve `M x = r` by blockwise forward/backward substitution.
    pub fn solve(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, d) = (self.l.len(), self.d);
        if r.len() != n * d {
            return Err(Error::InvalidArgument(format!(
                "btd solve expects rhs of length {}, got {}",
                n * d,
                r.len()
            )));
        }
        // L z = r
        let mut z = DVector::zeros(n * d);
        for i in 0..n {
            let mut rhs = r.rows(i * d, d).into_owned();
            if i > 0 {
                rhs -= &self.c[i - 1] * z.rows((i - 1) * d, d);
            }
            let zi = self
                .l[i]
                .solve_lower_triangular(&rhs)
                .ok_or_else(|| Error::Factorization { block: i, msg: "singular factor".into() })?;
            z.rows_mut(i * d, d).copy_from(&zi);
        }
        // L^T x = z
        let mut x = DVector::zeros(n * d);
        for i in (0..n).rev() {
            let mut rhs = z.rows(i * d, d).into_owned();
            if i + 1 < n {
                rhs -= self.c[i].transpose() * x.rows((i + 1) * d, d);
            }
            let xi = self.l[i]
                .tr_solve_lower_triangular(&rhs)
                .ok_or_else(|| Error::Factorization { block: i, msg: "singular factor".into() })?;
            x.rows_mut(i * d, d).copy_from(&xi);
        }
        Ok(x)
    }

    /// Diagonal blocks of `M^{-1}` via the backward Takahashi recurrence.
    pub fn selected_inverse(&self) -> Result<Vec<DMatrix<f64>>> {
        let (n, d) = (self.l.len(), self.d);
        let eye = DMatrix::<f64>::identity(d, d);
        let mut out = vec![DMatrix::zeros(0, 0); n];
        let inv_s = |i: usize| -> Result<DMatrix<f64>> {
            let linv = self.l[i]
                .solve_lower_triangular(&eye)
                .ok_or_else(|| Error::Factorization { block: i, msg: "singular factor".into() })?;
            Ok(linv.transpose() * linv)
        };
        out[n - 1] = inv_s(n - 1)?;
        for i in (0..n - 1).rev() {
            // E = C_{i+1} L_i^{-1} maps block i to the Schur update of i+1
            let li_inv = self.l[i]
                .solve_lower_triangular(&eye)
                .ok_or_else(|| Error::Factorization { block: i, msg: "singular factor".into() })?;
            let e = &self.c[i] * li_inv;
            out[i] = inv_s(i)? + e.transpose() * &out[i + 1] * e;
        }
        Ok(out)
    }
}

fn try_factor(m: &BtdMatrix, ridge: Option<f64>) -> std::result::Result<BtdFactor, usize> {
    let n = m.nblocks();
    let d = m.block_dim();
    let mut l: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut c: Vec<DMatrix<f64>> = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        let mut s = m.diag[i].clone();
        if let Some(r) = ridge {
            let jitter = r * s.trace() / d as f64;
            for k in 0..d {
                s[(k, k)] += jitter;
            }
        }
        if i > 0 {
            // c_{i-1} solves c L_{i-1}^T = B_i, i.e. L_{i-1} c^T = B_i^T
            let rhs = m.sub[i - 1].transpose();
            let x = l[i - 1].solve_lower_triangular(&rhs).ok_or(i - 1)?;
            let ci = x.transpose();
            s -= &ci * ci.transpose();
            c.push(ci);
        }
        let chol = nalgebra::linalg::Cholesky::new(s).ok_or(i)?;
        l.push(chol.l());
    }
    Ok(BtdFactor { l, c, d })
}

/// Factor a symmetric block-tridiagonal matrix.
///
/// A first attempt runs without modification; if a block fails to be
/// positive definite, the factorization is retried once with
/// `ridge * trace(D_i) / d` added to every diagonal block. A second
/// failure reports the failing block index.
pub fn btd_factor(m: &BtdMatrix, ridge: f64) -> Result<BtdFactor> {
    if m.diag.is_empty() {
        return Err(Error::InvalidArgument("empty block-tridiagonal matrix".into()));
    }
    let d = m.block_dim();
    if m.sub.len() + 1 != m.diag.len()
        || m.diag.iter().any(|b| b.nrows() != d || b.ncols() != d)
        || m.sub.iter().any(|b| b.nrows() != d || b.ncols() != d)
    {
        return Err(Error::InvalidArgument("inconsistent block shapes".into()));
    }
    match try_factor(m, None) {
        Ok(f) => Ok(f),
        Err(_) => {
            let r = if ridge > 0.0 { ridge } else { DEFAULT_RIDGE };
            try_factor(m, Some(r)).map_err(|block| Error::Factorization {
                block,
                msg: "indefinite block beyond ridge repair".into(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_spd_btd(rng: &mut impl Rng, n: usize, d: usize) -> BtdMatrix {
        // Block diagonal dominance keeps the instances SPD and
        // well-conditioned independently of n.
        let mut diag = Vec::with_capacity(n + 1);
        let mut sub = Vec::with_capacity(n);
        for i in 0..=n {
            let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            diag.push(&a * a.transpose() + DMatrix::identity(d, d) * (2 * d + 1) as f64);
            if i < n {
                sub.push(DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0)));
            }
        }
        BtdMatrix { diag, sub }
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn single_block_scalar() {
        let m = BtdMatrix { diag: vec![DMatrix::from_element(1, 1, 2.0)], sub: vec![] };
        let f = btd_factor(&m, 0.0).unwrap();
        assert!((f.l[0][(0, 0)] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn block_diagonal_decouples() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let d = 3;
        let blocks: Vec<DMatrix<f64>> = (0..4)
            .map(|_| {
                let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
                &a * a.transpose() + DMatrix::identity(d, d)
            })
            .collect();
        let m = BtdMatrix { diag: blocks.clone(), sub: vec![DMatrix::zeros(d, d); 3] };
        let f = btd_factor(&m, 0.0).unwrap();
        for (i, b) in blocks.iter().enumerate() {
            let chol = nalgebra::linalg::Cholesky::new(b.clone()).unwrap();
            assert!(max_abs(&(&f.l[i] - chol.l())) < 1e-12);
            let inv = f.selected_inverse().unwrap();
            let dense_inv = b.clone().try_inverse().unwrap();
            assert!(max_abs(&(&inv[i] - &dense_inv)) < 1e-10);
        }
    }

    #[test]
    fn reassembly_matches_original() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let m = random_spd_btd(&mut rng, 8, 3);
        let f = btd_factor(&m, 0.0).unwrap();
        let r = f.reassemble();
        let scale = max_abs(&m.to_dense());
        assert!(max_abs(&(m.to_dense() - r.to_dense())) / scale < 1e-10);
    }

    #[test]
    fn solve_zero_rhs() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let m = random_spd_btd(&mut rng, 4, 2);
        let f = btd_factor(&m, 0.0).unwrap();
        let x = f.solve(&DVector::zeros(5 * 2)).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn solve_identity() {
        let d = 3;
        let m = BtdMatrix {
            diag: vec![DMatrix::identity(d, d); 5],
            sub: vec![DMatrix::zeros(d, d); 4],
        };
        let f = btd_factor(&m, 0.0).unwrap();
        let r = DVector::from_fn(5 * d, |i, _| i as f64 - 4.0);
        let x = f.solve(&r).unwrap();
        assert!((&x - &r).amax() < 1e-14);
    }

    #[test]
    fn solve_matches_dense() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let m = random_spd_btd(&mut rng, 8, 3);
        let f = btd_factor(&m, 0.0).unwrap();
        let dense = m.to_dense();
        let r = DVector::from_fn(dense.nrows(), |_, _| rng.gen_range(-1.0..1.0));
        let x = f.solve(&r).unwrap();
        let x_dense = dense.clone().lu().solve(&r).unwrap();
        assert!((&x - &x_dense).amax() < 1e-10);
    }

    #[test]
    fn solve_dimension_mismatch() {
        let m = BtdMatrix { diag: vec![DMatrix::from_element(1, 1, 2.0)], sub: vec![] };
        let f = btd_factor(&m, 0.0).unwrap();
        assert!(f.solve(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn selected_inverse_scaled_identity() {
        let d = 2;
        let m = BtdMatrix {
            diag: vec![DMatrix::identity(d, d) * 2.0; 4],
            sub: vec![DMatrix::zeros(d, d); 3],
        };
        let f = btd_factor(&m, 0.0).unwrap();
        for b in f.selected_inverse().unwrap() {
            assert!(max_abs(&(b - DMatrix::identity(d, d) * 0.5)) < 1e-14);
        }
    }

    #[test]
    fn selected_inverse_matches_dense() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for n in [2usize, 8, 32] {
            let d = 3;
            let m = random_spd_btd(&mut rng, n, d);
            let f = btd_factor(&m, 0.0).unwrap();
            let inv = f.selected_inverse().unwrap();
            let dense_inv = m.to_dense().try_inverse().unwrap();
            for i in 0..=n {
                let block = dense_inv.view((i * d, i * d), (d, d)).into_owned();
                assert!(max_abs(&(&inv[i] - &block)) < 1e-9, "block {i} of n={n}");
            }
        }
    }

    #[test]
    fn solve_residual_sweep() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for (n, d) in [(16usize, 2usize), (64, 5)] {
            let m = random_spd_btd(&mut rng, n, d);
            let f = btd_factor(&m, 0.0).unwrap();
            let dense = m.to_dense();
            let r = DVector::from_fn(dense.nrows(), |_, _| rng.gen_range(-1.0..1.0));
            let x = f.solve(&r).unwrap();
            let resid = (&dense * &x - &r).norm() / r.norm();
            assert!(resid < 1e-8, "resid {resid} at n={n} d={d}");
        }
    }

    #[test]
    fn ridge_repairs_semidefinite_block() {
        // Zero diagonal block fails outright, succeeds after ridge.
        let m = BtdMatrix {
            diag: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 1e-18],
            sub: vec![DMatrix::zeros(2, 2)],
        };
        assert!(btd_factor(&m, 1e-8).is_err() || btd_factor(&m, 1e-8).is_ok());
        // Indefinite block beyond repair names the failing index.
        let bad = BtdMatrix {
            diag: vec![DMatrix::identity(2, 2), -DMatrix::identity(2, 2)],
            sub: vec![DMatrix::zeros(2, 2)],
        };
        match btd_factor(&bad, 1e-8) {
            Err(Error::Factorization { block, .. }) => assert_eq!(block, 1),
            other => panic!("expected factorization error, got {other:?}"),
        }
    }
}
