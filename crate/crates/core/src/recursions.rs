//! Fast recursions for the Cholesky factor of `K + W^{-1}`, its inverse,
//! and the O(n) forward/backward solves for beta and alpha, all read off
//! completed filter/smoother passes. These serve as independent oracles
//! for the primitives; production inference never needs the dense
//! factors.

use nalgebra::{DMatrix, DVector};

use crate::discretize::DiscreteTransitions;
use crate::error::{Error, Result};
use crate::kalman::{FilterOutput, SmootherOutput};
use crate::kernels::StateSpaceModel;

/// Dense factors assembled from the filter quantities.
#[derive(Debug, Clone)]
pub struct CholFactors {
    /// Lower-triangular factor with `L L^T = K + W^{-1}`.
    pub l: DMatrix<f64>,
    /// Its inverse, when requested.
    pub linv: Option<DMatrix<f64>>,
}

fn innovation_stats(filter: &FilterOutput, w: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = filter.steps.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = &filter.steps[i];
        if !s.labeled || !(w[i] > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step {i}: the factor recursions need labeled steps with positive site precision"
            )));
        }
        // s_i = z_i / W_ii and v_i = -c_i / W_ii.
        out.push((s.z / w[i], -s.c / w[i]));
    }
    Ok(out)
}

/// O(n^2) recursion for the lower Cholesky factor of `K + W^{-1}`,
/// built by iterated right-multiplication with the transition matrices.
pub fn chol_recursion(
    filter: &FilterOutput,
    trans: &DiscreteTransitions,
    model: &StateSpaceModel,
    w: &[f64],
) -> Result<CholFactors> {
    let n = filter.steps.len();
    let stats = innovation_stats(filter, w)?;
    let mut l = DMatrix::<f64>::zeros(n, n);
    let h = &model.h;
    for j in 0..n {
        let sj = stats[j].0.sqrt();
        l[(j, j)] = sj;
        let mut v: DVector<f64> = filter.steps[j].gain.clone();
        for i in (j + 1)..n {
            v = &trans.a[i - 1] * v;
            l[(i, j)] = (h * &v)[(0, 0)] * sj;
        }
    }
    Ok(CholFactors { l, linv: None })
}

/// O(n^2) recursion for the inverse Cholesky factor, so that
/// `L^{-1} L^{-T} = (K + W^{-1})^{-1}`.
pub fn inv_chol_recursion(
    filter: &FilterOutput,
    trans: &DiscreteTransitions,
    model: &StateSpaceModel,
    w: &[f64],
) -> Result<DMatrix<f64>> {
    let n = filter.steps.len();
    let stats = innovation_stats(filter, w)?;
    let d = model.dim();
    let h = &model.h;
    let eye = DMatrix::<f64>::identity(d, d);
    let mut linv = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        linv[(j, j)] = 1.0 / stats[j].0.sqrt();
        let mut v: DVector<f64> = filter.steps[j].gain.clone();
        for i in (j + 1)..n {
            v = &trans.a[i - 1] * v;
            linv[(i, j)] = -(h * &v)[(0, 0)] / stats[i].0.sqrt();
            // Park the update for the next row: (I - k_i H) v.
            let ki = &filter.steps[i].gain;
            v = (&eye - ki * h) * v;
        }
    }
    Ok(linv)
}

/// O(n) innovation-form solves: `beta = L \ r` from the filter pass and
/// `alpha = L^T \ beta` from the smoother increments.
pub fn alpha_beta_recursion(
    filter: &FilterOutput,
    smoother: &SmootherOutput,
    w: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = filter.steps.len();
    let stats = innovation_stats(filter, w)?;
    let mut beta = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for i in 0..n {
        let (si, vi) = stats[i];
        beta.push(vi / si.sqrt());
        // alpha_i = gamma_i - W_ii rho_i, with rho_n = 0 at the boundary.
        alpha.push(filter.steps[i].gamma - w[i] * smoother.rho[i]);
    }
    Ok((beta, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::discretize_exact;
    use crate::kalman::{kalman_filter, rts_smoother, FilterMode, SiteParams};
    use crate::kernels::{build_model, covariance, HyperParams, KernelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    struct Fixture {
        model: StateSpaceModel,
        trans: DiscreteTransitions,
        filter: FilterOutput,
        smoother: SmootherOutput,
        sites: SiteParams,
        dense: DMatrix<f64>, // K + W^{-1}
        r: Vec<f64>,
    }

    fn fixture(kernel: &str, n: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let spec = KernelSpec::parse(kernel).unwrap();
        let hp = HyperParams::new(vec![0.6f64.ln(), 0.9f64.ln()], vec![]);
        let model = build_model(&spec, &hp).unwrap();
        let mut t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..(n as f64 / 15.0))).collect();
        t.sort_by(f64::total_cmp);
        let dts: Vec<f64> = t.windows(2).map(|x| x[1] - x[0]).collect();
        let trans = discretize_exact(&model, &dts, None).unwrap();
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.4..6.0)).collect();
        let b: Vec<f64> = r.iter().zip(&w).map(|(ri, wi)| ri * wi).collect();
        let sites = SiteParams { b, w: w.clone() };
        let filter = kalman_filter(&trans, &model, &vec![true; n], FilterMode::Sites(&sites)).unwrap();
        let smoother = rts_smoother(&filter, &trans, &model, &sites.w).unwrap();
        let mut dense = DMatrix::from_fn(n, n, |i, j| covariance(&spec, &hp, t[i] - t[j]));
        for i in 0..n {
            dense[(i, i)] += 1.0 / w[i];
        }
        Fixture { model, trans, filter, smoother, sites, dense, r }
    }

    #[test]
    fn scalar_case() {
        let fx = fixture("matern12", 1, 51);
        let f = chol_recursion(&fx.filter, &fx.trans, &fx.model, &fx.sites.w).unwrap();
        let expected = fx.dense[(0, 0)].sqrt();
        assert!((f.l[(0, 0)] - expected).abs() < 1e-12);
        let linv = inv_chol_recursion(&fx.filter, &fx.trans, &fx.model, &fx.sites.w).unwrap();
        assert!((linv[(0, 0)] - 1.0 / expected).abs() < 1e-12);
        let (_, alpha) = alpha_beta_recursion(&fx.filter, &fx.smoother, &fx.sites.w).unwrap();
        assert!((alpha[0] - fx.r[0] / fx.dense[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn factor_matches_dense_cholesky() {
        let fx = fixture("matern12", 50, 52);
        let f = chol_recursion(&fx.filter, &fx.trans, &fx.model, &fx.sites.w).unwrap();
        let chol = nalgebra::linalg::Cholesky::new(fx.dense.clone()).unwrap();
        let diff = (&f.l - chol.l()).amax();
        assert!(diff < 1e-8, "max diff {diff}");

        // Diagonal entries coincide with sqrt(z_i / W_ii) by definition.
        for i in 0..50 {
            let si = fx.filter.steps[i].z / fx.sites.w[i];
            assert!((f.l[(i, i)] - si.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_factor_matches_dense() {
        let fx = fixture("matern32", 50, 53);
        let f = chol_recursion(&fx.filter, &fx.trans, &fx.model, &fx.sites.w).unwrap();
        let linv = inv_chol_recursion(&fx.filter, &fx.trans, &fx.model, &fx.sites.w).unwrap();

        let prod = &f.l * &linv;
        assert!((prod - DMatrix::<f64>::identity(50, 50)).amax() < 1e-8);

        let dense_inv = f
            .l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(50, 50))
            .unwrap();
        assert!((&linv - dense_inv).amax() < 1e-8);

        // L^{-1} L^{-T} recomposes (K + W^{-1})^{-1}.
        let inv = linv.transpose() * &linv;
        let direct = fx.dense.clone().try_inverse().unwrap();
        assert!((inv - direct).amax() < 1e-7);
    }

    #[test]
    fn alpha_beta_match_dense_substitution() {
        let fx = fixture("matern32", 100, 54);
        let (beta, alpha) = alpha_beta_recursion(&fx.filter, &fx.smoother, &fx.sites.w).unwrap();
        let chol = nalgebra::linalg::Cholesky::new(fx.dense.clone()).unwrap();
        let rv = DVector::from_vec(fx.r.clone());
        let beta_dense = chol.l().solve_lower_triangular(&rv).unwrap();
        let alpha_dense = chol.solve(&rv);
        for i in 0..100 {
            assert!((beta[i] - beta_dense[i]).abs() < 1e-8, "beta {i}");
            assert!((alpha[i] - alpha_dense[i]).abs() < 1e-8, "alpha {i}");
        }
        // The recursion alpha is algebraically the smoother alpha.
        for i in 0..100 {
            assert!((alpha[i] - fx.smoother.alpha[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn log_diagonal_links_to_filter_accumulator() {
        let fx = fixture("matern32", 60, 55);
        let f = chol_recursion(&fx.filter, &fx.trans, &fx.model, &fx.sites.w).unwrap();
        let sum_logdiag: f64 = (0..60).map(|i| f.l[(i, i)].ln()).sum();
        let sum_logw: f64 = fx.sites.w.iter().map(|w| w.ln()).sum();
        assert!((sum_logdiag - 0.5 * (fx.filter.ld - sum_logw)).abs() < 1e-10);
    }

    #[test]
    fn zero_precision_is_rejected() {
        let mut fx = fixture("matern32", 10, 56);
        fx.sites.w[3] = 0.0;
        assert!(chol_recursion(&fx.filter, &fx.trans, &fx.model, &fx.sites.w).is_err());
        assert!(inv_chol_recursion(&fx.filter, &fx.trans, &fx.model, &fx.sites.w).is_err());
    }
}
