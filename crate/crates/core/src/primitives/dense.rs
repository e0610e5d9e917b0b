//! Dense cubic-time oracle for the computational primitives, built from
//! the closed-form covariance function. The exact-regression path follows
//! the textbook Cholesky recipe verbatim and generalizes to arbitrary
//! site precisions for cross-checking the state-space route.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kalman::SiteParams;
use crate::kernels::{covariance, HyperParams, KernelSpec};
use crate::likelihoods::Likelihood;

use super::{AdfSweep, Backend, Posterior};

/// Dense Gram-matrix backend.
pub struct DenseOracle {
    spec: KernelSpec,
    hypers: HyperParams,
    t: Vec<f64>,
    k: DMatrix<f64>,
}

impl DenseOracle {
    pub fn new(spec: KernelSpec, hypers: HyperParams, t: &[f64]) -> Result<Self> {
        if t.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("inputs must be sorted ascending".into()));
        }
        let n = t.len();
        let k = DMatrix::from_fn(n, n, |i, j| covariance(&spec, &hypers, t[i] - t[j]));
        Ok(DenseOracle { spec, hypers, t: t.to_vec(), k })
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// LU-based solve of `(I + W K) x = rhs`; valid for any site signs.
    fn solve_iwk(&self, w: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.t.len();
        let m = DMatrix::from_fn(n, n, |i, j| {
            (i == j) as u64 as f64 + w[i] * self.k[(i, j)]
        });
        m.lu()
            .solve(rhs)
            .ok_or_else(|| Error::Numerical { step: 0, msg: "singular I + W K".into() })
    }

    /// Textbook Gaussian-process regression: Cholesky of `K + sn2 I`,
    /// evidence, and predictive moments at the test inputs. Targets `r`
    /// are already centered.
    pub fn gpr_reference(
        &self,
        r: &[f64],
        sigma_n2: f64,
        test_t: &[f64],
    ) -> Result<(f64, Vec<f64>, Vec<(f64, f64)>)> {
        let n = self.t.len();
        let mut reg = self.k.clone();
        for i in 0..n {
            reg[(i, i)] += sigma_n2;
        }
        let chol = nalgebra::linalg::Cholesky::new(reg)
            .ok_or_else(|| Error::Numerical { step: 0, msg: "K + sn2 I not SPD".into() })?;
        let alpha = chol.solve(&DVector::from_column_slice(r));
        let quad: f64 = r.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
        let half_logdet: f64 = (0..n).map(|i| chol.l()[(i, i)].ln()).sum();
        let logz =
            -0.5 * quad - half_logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        let mut preds = Vec::with_capacity(test_t.len());
        for &ts in test_t {
            let kstar = DVector::from_fn(n, |i, _| covariance(&self.spec, &self.hypers, self.t[i] - ts));
            let mu = kstar.dot(&alpha);
            let v = chol.solve(&kstar);
            let var = covariance(&self.spec, &self.hypers, 0.0) - kstar.dot(&v);
            preds.push((mu, var));
        }
        Ok((logz, alpha.iter().copied().collect(), preds))
    }
}

impl Backend for DenseOracle {
    fn len(&self) -> usize {
        self.t.len()
    }

    fn mvm_k(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.t.len() {
            return Err(Error::InvalidArgument("mvm length mismatch".into()));
        }
        let v = &self.k * DVector::from_column_slice(r);
        Ok(v.iter().copied().collect())
    }

    fn solve_k(&self, w: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        // W r - W K (I + W K)^{-1} W r, never forming W^{-1}.
        let n = self.t.len();
        if n == 0 {
            return Ok(vec![]);
        }
        let wr = DVector::from_fn(n, |i, _| w[i] * r[i]);
        let s = self.solve_iwk(w, &wr)?;
        let ks = &self.k * s;
        Ok((0..n).map(|i| wr[i] - w[i] * ks[i]).collect())
    }

    fn ld_k(&self, w: &[f64]) -> Result<f64> {
        let n = self.t.len();
        if n == 0 {
            return Ok(0.0);
        }
        if w.iter().all(|&wi| wi >= 0.0) {
            // Symmetric well-conditioned form B = I + sqrt(W) K sqrt(W).
            let b = DMatrix::from_fn(n, n, |i, j| {
                (i == j) as u64 as f64 + w[i].sqrt() * self.k[(i, j)] * w[j].sqrt()
            });
            let chol = nalgebra::linalg::Cholesky::new(b)
                .ok_or_else(|| Error::Numerical { step: 0, msg: "B not SPD".into() })?;
            return Ok((0..n).map(|i| 2.0 * chol.l()[(i, i)].ln()).sum());
        }
        // General form log|I + K W| with sign tracking.
        let m = DMatrix::from_fn(n, n, |i, j| (i == j) as u64 as f64 + self.k[(i, j)] * w[j]);
        let lu = m.lu();
        let mut logdet = 0.0;
        let mut sign = 1.0f64;
        let u = lu.u();
        for i in 0..n {
            let d = u[(i, i)];
            sign *= d.signum();
            logdet += d.abs().ln();
        }
        sign *= lu.p().determinant::<f64>();
        if sign <= 0.0 {
            return Err(Error::Numerical { step: 0, msg: "nonpositive determinant of I + K W".into() });
        }
        Ok(logdet)
    }

    fn ld_k_dw(&self, w: &[f64]) -> Result<Vec<f64>> {
        // diag((K^{-1} + W)^{-1}) = diag(K - K (I + W K)^{-1} W K)
        let n = self.t.len();
        if n == 0 {
            return Ok(vec![]);
        }
        let wk = DMatrix::from_fn(n, n, |i, j| w[i] * self.k[(i, j)]);
        let m = DMatrix::from_fn(n, n, |i, j| (i == j) as u64 as f64 + wk[(i, j)]);
        let x = m
            .lu()
            .solve(&wk)
            .ok_or_else(|| Error::Numerical { step: 0, msg: "singular I + W K".into() })?;
        Ok((0..n)
            .map(|i| self.k[(i, i)] - (self.k.row(i) * x.column(i))[(0, 0)])
            .collect())
    }

    fn posterior(&self, sites: &SiteParams) -> Result<Posterior> {
        let n = self.t.len();
        let alpha = self.solve_iwk(&sites.w, &DVector::from_column_slice(&sites.b))?;
        let mean = &self.k * &alpha;
        let var = self.ld_k_dw(&sites.w)?;
        let ld = self.ld_k(&sites.w)?;
        Ok(Posterior {
            alpha: alpha.iter().copied().collect(),
            mean: (0..n).map(|i| mean[i]).collect(),
            var,
            ld,
        })
    }

    fn adf_sweep(&self, lik: &Likelihood, y: &[f64], mean: &[f64], quad: usize) -> Result<AdfSweep> {
        // Sequential conditioning on the joint Gaussian, one rank-one
        // update per step; the running marginal at step i equals the
        // Kalman cavity by the Markov property.
        let n = self.t.len();
        let mut mu = DVector::<f64>::zeros(n);
        let mut sigma = self.k.clone();
        let mut sites = SiteParams::zeros(n);
        let mut logz0 = vec![0.0; n];
        let mut clipped = 0;
        for i in 0..n {
            let s2 = sigma[(i, i)];
            let mm = lik.adf_moments(y[i], mu[i] + mean[i], s2, quad)?;
            if mm.clipped {
                clipped += 1;
            }
            let b = mm.site_b - mm.site_w * mean[i];
            let w = mm.site_w;
            sites.b[i] = b;
            sites.w[i] = w;
            logz0[i] = mm.logz0;
            let z = w * s2 + 1.0;
            if !(z > 0.0) {
                return Err(Error::Numerical { step: i, msg: format!("z = {z}") });
            }
            let gamma = -(w * mu[i] - b) / z;
            let col = sigma.column(i).into_owned();
            mu += &col * gamma;
            sigma -= &col * col.transpose() * (w / z);
        }
        Ok(AdfSweep { sites, logz0, clipped })
    }

    fn predict(&self, sites: &SiteParams, test_t: &[f64]) -> Result<Vec<(f64, f64)>> {
        let n = self.t.len();
        let alpha = self.solve_iwk(&sites.w, &DVector::from_column_slice(&sites.b))?;
        let mut preds = Vec::with_capacity(test_t.len());
        for &ts in test_t {
            let kstar: Vec<f64> =
                (0..n).map(|i| covariance(&self.spec, &self.hypers, self.t[i] - ts)).collect();
            let mu = kstar.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum::<f64>();
            let sol = self.solve_k(&sites.w, &kstar)?;
            let var = covariance(&self.spec, &self.hypers, 0.0)
                - kstar.iter().zip(sol.iter()).map(|(a, b)| a * b).sum::<f64>();
            preds.push((mu, var));
        }
        Ok(preds)
    }
}
