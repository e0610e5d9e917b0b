//! SpInGP realization of the computational primitives: the joint state
//! precision is block tridiagonal, `K^{-1} = T^T Q^{-1} T` with
//! `K = G (A Q A^T) G^T`, so regularized solves and selected inversion
//! reduce to block-tridiagonal work, while `ld` and posterior moments
//! run through the Kalman recursions.

use nalgebra::{DMatrix, DVector};

use crate::discretize::{
    build_interp_grid, discretize_exact, interp_transitions, DiscreteTransitions, InterpGrid,
    InterpOptions,
};
use crate::error::{Error, Result};
use crate::kalman::{kalman_filter, rts_smoother, FilterMode, SiteParams};
use crate::kernels::{ModelDerivatives, StateSpaceModel};
use crate::likelihoods::Likelihood;
use crate::linalg::{btd_factor, BtdMatrix, DEFAULT_RIDGE};

use super::{AdfSweep, Backend, Posterior};

/// Joint-state representation: transitions `A_1..A_n` (the first bridges
/// an artificial initial state), noise blocks `P_0, Q_1..Q_n`, and their
/// ridged inverses for the precision assembly.
struct SpInGpRep {
    a: Vec<DMatrix<f64>>,
    q: Vec<DMatrix<f64>>,
    qinv: Vec<DMatrix<f64>>,
    da: Option<Vec<Vec<DMatrix<f64>>>>,
    dq: Option<Vec<Vec<DMatrix<f64>>>>,
}

/// Linear-time backend: per-gap transitions plus the SpInGP joint view.
pub struct StateSpaceBackend {
    model: StateSpaceModel,
    derivs: Option<ModelDerivatives>,
    t: Vec<f64>,
    trans: DiscreteTransitions,
    grid: Option<InterpGrid>,
    rep: SpInGpRep,
}

fn ridged_inverse(q: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let d = q.nrows();
    if let Some(chol) = nalgebra::linalg::Cholesky::new(q.clone()) {
        return Ok(chol.inverse());
    }
    let mut qj = q.clone();
    for k in 0..d {
        qj[(k, k)] += jitter;
    }
    nalgebra::linalg::Cholesky::new(qj)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Factorization { block: 0, msg: "noise block not repairable".into() })
}

impl StateSpaceBackend {
    pub fn new(
        model: StateSpaceModel,
        derivs: Option<ModelDerivatives>,
        t: &[f64],
        interp: &InterpOptions,
    ) -> Result<Self> {
        if t.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("inputs must be sorted ascending".into()));
        }
        let dts: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let (grid, trans) = if interp.enabled && !dts.is_empty() {
            let grid = build_interp_grid(&model, &dts, interp.k, derivs.as_ref())?;
            let trans = interp_transitions(&grid, &dts)?;
            (Some(grid), trans)
        } else {
            (None, discretize_exact(&model, &dts, derivs.as_ref())?)
        };

        // Artificial first transition: any positive gap yields the exact
        // joint covariance when the chain starts from P0.
        let positive: Vec<f64> = dts.iter().copied().filter(|&g| g > 0.0).collect();
        let delta0 = if positive.is_empty() {
            1.0
        } else {
            positive.iter().sum::<f64>() / positive.len() as f64
        };
        let first = discretize_exact(&model, &[delta0], derivs.as_ref())?;

        let d = model.dim();
        let jitter = 3e-10 * model.pinf.trace().max(1e-300) / d as f64;
        let n = t.len();
        let mut a = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n + 1);
        q.push(model.pinf.clone());
        if n > 0 {
            a.push(first.a[0].clone());
            q.push(first.q[0].clone());
            for i in 0..dts.len() {
                a.push(trans.a[i].clone());
                q.push(trans.q[i].clone());
            }
        }
        let qinv = q.iter().map(|qi| ridged_inverse(qi, jitter)).collect::<Result<Vec<_>>>()?;

        let (da, dq) = match (&derivs, &trans.da, &trans.dq, &first.da, &first.dq) {
            (Some(dv), Some(tda), Some(tdq), Some(fda), Some(fdq)) => {
                let np = dv.n_params();
                let mut da_all = vec![Vec::with_capacity(n); np];
                let mut dq_all = vec![Vec::with_capacity(n + 1); np];
                for p in 0..np {
                    dq_all[p].push(dv.dpinf[p].clone());
                    if n > 0 {
                        da_all[p].push(fda[p][0].clone());
                        dq_all[p].push(fdq[p][0].clone());
                        for i in 0..dts.len() {
                            da_all[p].push(tda[p][i].clone());
                            dq_all[p].push(tdq[p][i].clone());
                        }
                    }
                }
                (Some(da_all), Some(dq_all))
            }
            _ => (None, None),
        };

        Ok(StateSpaceBackend {
            model,
            derivs,
            t: t.to_vec(),
            trans,
            grid,

            rep: SpInGpRep { a, q, qinv, da, dq },
        })
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.model
    }

    pub fn derivatives(&self) -> Option<&ModelDerivatives> {
        self.derivs.as_ref()
    }

    pub fn transitions(&self) -> &DiscreteTransitions {
        &self.trans
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    fn labeled(&self) -> Vec<bool> {
        vec![true; self.t.len()]
    }

    /// Assemble `R = T^T Q^{-1} T + G^T W G` as a block-tridiagonal
    /// matrix over the n+1 joint states.
    fn assemble_r(&self, w: &[f64]) -> BtdMatrix {
        let n = self.t.len();
        let hth = self.model.h.transpose() * &self.model.h;
        let mut diag = Vec::with_capacity(n + 1);
        let mut sub = Vec::with_capacity(n);
        for j in 0..=n {
            let mut block = self.rep.qinv[j].clone();
            if j < n {
                let anext = &self.rep.a[j];
                block += anext.transpose() * &self.rep.qinv[j + 1] * anext;
            }
            if j >= 1 {
                block += &hth * w[j - 1];
            }
            diag.push(block);
            if j < n {
                sub.push(-(&self.rep.qinv[j + 1] * &self.rep.a[j]));
            }
        }
        BtdMatrix { diag, sub }
    }

    /// `G^T v` for an observation-space vector.
    fn expand(&self, v: &[f64]) -> DVector<f64> {
        let n = self.t.len();
        let d = self.model.dim();
        let mut out = DVector::zeros((n + 1) * d);
        for i in 0..n {
            for k in 0..d {
                out[(i + 1) * d + k] = self.model.h[(0, k)] * v[i];
            }
        }
        out
    }

    /// `G x` back to observation space.
    fn contract(&self, x: &DVector<f64>) -> Vec<f64> {
        let n = self.t.len();
        let d = self.model.dim();
        (0..n)
            .map(|i| (0..d).map(|k| self.model.h[(0, k)] * x[(i + 1) * d + k]).sum())
            .collect()
    }

    /// Solve `T^T x = v` (upper block-bidiagonal, unit diagonal).
    fn solve_tt(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.t.len();
        let d = self.model.dim();
        let mut x = v.clone();
        for j in (0..n).rev() {
            let upper = self.rep.a[j].transpose() * x.rows((j + 1) * d, d);
            let mut seg = x.rows_mut(j * d, d);
            seg += upper;
        }
        x
    }

    /// Solve `T x = v` (lower block-bidiagonal, unit diagonal).
    fn solve_t(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.t.len();
        let d = self.model.dim();
        let mut x = v.clone();
        for j in 0..n {
            let lower = &self.rep.a[j] * x.rows(j * d, d);
            let mut seg = x.rows_mut((j + 1) * d, d);
            seg += lower;
        }
        x
    }

    /// Block-diagonal multiply by the joint noise covariance.
    fn q_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let d = self.model.dim();
        let mut out = DVector::zeros(v.len());
        for (j, q) in self.rep.q.iter().enumerate() {
            out.rows_mut(j * d, d).copy_from(&(q * v.rows(j * d, d)));
        }
        out
    }

    /// Per-kernel-parameter derivative of `K r` via the product rule on
    /// `G T^{-1} Q T^{-T} G^T r`.
    pub fn mvm_k_grad(&self, r: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (da, dq) = match (&self.rep.da, &self.rep.dq) {
            (Some(da), Some(dq)) => (da, dq),
            _ => {
                return Err(Error::InvalidArgument(
                    "backend built without derivative data".into(),
                ))
            }
        };
        let n = self.t.len();
        let d = self.model.dim();
        let x = self.solve_tt(&self.expand(r));
        let qx = self.q_mul(&x);
        let z = self.solve_t(&qx);

        let mut out = Vec::with_capacity(da.len());
        for p in 0..da.len() {
            // u = -dT z + dQ x - Q T^{-T} (dT^T x)
            let mut u = DVector::<f64>::zeros((n + 1) * d);
            for j in 0..n {
                let seg = &da[p][j] * z.rows(j * d, d);
                let mut dst = u.rows_mut((j + 1) * d, d);
                dst += seg;
            }
            for j in 0..=n {
                let seg = &dq[p][j] * x.rows(j * d, d);
                let mut dst = u.rows_mut(j * d, d);
                dst += seg;
            }
            let mut s = DVector::<f64>::zeros((n + 1) * d);
            for j in 0..n {
                let seg = da[p][j].transpose() * x.rows((j + 1) * d, d);
                let mut dst = s.rows_mut(j * d, d);
                dst -= seg;
            }
            let t = self.solve_tt(&s);
            u -= self.q_mul(&t);
            out.push(self.contract(&self.solve_t(&u)));
        }
        Ok(out)
    }

    /// Transitions for a merged train/test timeline, reusing the
    /// interpolation grid when one is active.
    fn merged_transitions(&self, dts: &[f64]) -> Result<DiscreteTransitions> {
        match &self.grid {
            Some(grid) => interp_transitions(grid, dts),
            None => discretize_exact(&self.model, dts, self.derivs.as_ref()),
        }
    }
}

impl Backend for StateSpaceBackend {
    fn len(&self) -> usize {
        self.t.len()
    }

    fn mvm_k(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.t.len() {
            return Err(Error::InvalidArgument("mvm length mismatch".into()));
        }
        let x = self.solve_tt(&self.expand(r));
        let qx = self.q_mul(&x);
        Ok(self.contract(&self.solve_t(&qx)))
    }

    fn solve_k(&self, w: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let n = self.t.len();
        if w.len() != n || r.len() != n {
            return Err(Error::InvalidArgument("solve length mismatch".into()));
        }
        if n == 0 {
            return Ok(vec![]);
        }
        // W r - W G R^{-1} G^T W r
        let wr: Vec<f64> = w.iter().zip(r).map(|(wi, ri)| wi * ri).collect();
        let rmat = self.assemble_r(w);
        let factor = btd_factor(&rmat, DEFAULT_RIDGE)?;
        let x = factor.solve(&self.expand(&wr))?;
        let gx = self.contract(&x);
        Ok(wr.iter().zip(gx.iter()).zip(w).map(|((wri, gi), wi)| wri - wi * gi).collect())
    }

    fn ld_k(&self, w: &[f64]) -> Result<f64> {
        let n = self.t.len();
        let sites = SiteParams { b: vec![0.0; n], w: w.to_vec() };
        let out = kalman_filter(&self.trans, &self.model, &self.labeled(), FilterMode::Sites(&sites))?;
        Ok(out.ld)
    }

    fn ld_k_dw(&self, w: &[f64]) -> Result<Vec<f64>> {
        let n = self.t.len();
        if n == 0 {
            return Ok(vec![]);
        }
        let rmat = self.assemble_r(w);
        let factor = btd_factor(&rmat, DEFAULT_RIDGE)?;
        let blocks = factor.selected_inverse()?;
        let h = &self.model.h;
        Ok((0..n).map(|i| (h * &blocks[i + 1] * h.transpose())[(0, 0)]).collect())
    }

    fn posterior(&self, sites: &SiteParams) -> Result<Posterior> {
        let out = kalman_filter(&self.trans, &self.model, &self.labeled(), FilterMode::Sites(sites))?;
        let sm = rts_smoother(&out, &self.trans, &self.model, &sites.w)?;
        Ok(Posterior { alpha: sm.alpha, mean: sm.mean, var: sm.var, ld: out.ld })
    }

    fn adf_sweep(&self, lik: &Likelihood, y: &[f64], mean: &[f64], quad: usize) -> Result<AdfSweep> {
        let out = kalman_filter(
            &self.trans,
            &self.model,
            &self.labeled(),
            FilterMode::Adf { lik, y, mean, quad },
        )?;
        let adf = out.adf.expect("ADF mode returns sites");
        Ok(AdfSweep { sites: adf.sites, logz0: adf.logz0, clipped: adf.clipped })
    }

    fn predict(&self, sites: &SiteParams, test_t: &[f64]) -> Result<Vec<(f64, f64)>> {
        // Merge test inputs into the timeline as unlabeled steps.
        let n = self.t.len();
        let mut merged: Vec<(f64, Option<usize>, Option<usize>)> = Vec::with_capacity(n + test_t.len());
        for (i, &ti) in self.t.iter().enumerate() {
            merged.push((ti, Some(i), None));
        }
        for (j, &tj) in test_t.iter().enumerate() {
            if !tj.is_finite() {
                return Err(Error::InvalidArgument("non-finite test input".into()));
            }
            merged.push((tj, None, Some(j)));
        }
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));

        let dts: Vec<f64> = merged.windows(2).map(|w| w[1].0 - w[0].0).collect();
        let trans = self.merged_transitions(&dts)?;
        let m = merged.len();
        let mut b = vec![0.0; m];
        let mut w = vec![0.0; m];
        let mut labeled = vec![false; m];
        for (k, &(_, train, _)) in merged.iter().enumerate() {
            if let Some(i) = train {
                b[k] = sites.b[i];
                w[k] = sites.w[i];
                labeled[k] = true;
            }
        }
        let msites = SiteParams { b, w };
        let out = kalman_filter(&trans, &self.model, &labeled, FilterMode::Sites(&msites))?;
        let sm = rts_smoother(&out, &trans, &self.model, &msites.w)?;

        let mut preds = vec![(0.0, 0.0); test_t.len()];
        for (k, &(_, _, test)) in merged.iter().enumerate() {
            if let Some(j) = test {
                preds[j] = (sm.mean[k], sm.var[k]);
            }
        }
        Ok(preds)
    }
}
