//! Forward Kalman filter with optional ADF moment matching and missing
//! labels, the RTS backward smoother, and differential filters for the
//! log-determinant and ADF evidence gradients.
//!
//! The filter operates on mean-centered targets: sites (b, W) describe
//! the effective likelihood of the centered latent, the state starts at
//! `m_1 = 0`, `P_1 = P0`, and predictions add the mean function back.

use nalgebra::{DMatrix, DVector};

use crate::discretize::DiscreteTransitions;
use crate::error::{Error, Result};
use crate::kernels::{ModelDerivatives, StateSpaceModel};
use crate::likelihoods::Likelihood;
use crate::linalg::symmetrize;

/// Natural parameters of the effective likelihood, one entry per step;
/// entries at unlabeled steps are ignored.
#[derive(Debug, Clone, Default)]
pub struct SiteParams {
    pub b: Vec<f64>,
    pub w: Vec<f64>,
}

impl SiteParams {
    pub fn zeros(n: usize) -> Self {
        SiteParams { b: vec![0.0; n], w: vec![0.0; n] }
    }

    pub fn gaussian(r: &[f64], sigma_n2: f64) -> Self {
        SiteParams {
            b: r.iter().map(|v| v / sigma_n2).collect(),
            w: vec![1.0 / sigma_n2; r.len()],
        }
    }
}

/// Per-step filter quantities.
#[derive(Debug, Clone)]
pub struct StepState {
    /// Filtered state mean.
    pub m: DVector<f64>,
    /// Filtered state covariance.
    pub p: DMatrix<f64>,
    /// Innovation factor `z = W sigma_f^2 + 1` (1 at unlabeled steps).
    pub z: f64,
    /// `c = W mu_f - b`.
    pub c: f64,
    /// `gamma = -c / z`.
    pub gamma: f64,
    /// Kalman gain.
    pub gain: DVector<f64>,
    pub labeled: bool,
    /// Predicted (cavity) latent mean `H m^-`, centered.
    pub pred_mean: f64,
    /// Predicted latent variance `H P^- H^T`.
    pub pred_var: f64,
}

/// Sites produced by an ADF sweep together with the per-step tilted
/// log-normalizers.
#[derive(Debug, Clone)]
pub struct AdfOutput {
    pub sites: SiteParams,
    pub logz0: Vec<f64>,
    /// Count of site precisions clipped at zero.
    pub clipped: usize,
}

/// Filter result: per-step states and the log-determinant accumulator.
#[derive(Debug)]
pub struct FilterOutput {
    pub steps: Vec<StepState>,
    /// `ld = sum_i log z_i` over labeled steps. Negative-curvature sites
    /// may flip individual factors; `ld` then accumulates `log |z_i|`
    /// and the run fails unless the flips cancel (the determinant
    /// identity `|I + K W| = prod z_i` needs a positive product).
    pub ld: f64,
    pub adf: Option<AdfOutput>,
}

/// Observation handling for the forward pass.
pub enum FilterMode<'a> {
    /// Fixed sites (b, W) on the centered latent.
    Sites(&'a SiteParams),
    /// Moment-match each site inside the sweep. `y` holds raw targets
    /// and `mean` the prior mean at each step.
    Adf { lik: &'a Likelihood, y: &'a [f64], mean: &'a [f64], quad: usize },
}

fn check_lengths(trans: &DiscreteTransitions, labeled: &[bool]) -> Result<()> {
    let n = labeled.len();
    if n == 0 {
        if !trans.is_empty() {
            return Err(Error::InvalidArgument("transitions without steps".into()));
        }
        return Ok(());
    }
    if trans.len() + 1 != n {
        return Err(Error::InvalidArgument(format!(
            "expected {} transitions for {} steps, got {}",
            n - 1,
            n,
            trans.len()
        )));
    }
    Ok(())
}

/// Forward filtering pass (Kalman). Unlabeled steps run the prediction
/// only. Returns an error naming the step when an innovation factor
/// becomes nonpositive.
pub fn kalman_filter(
    trans: &DiscreteTransitions,
    model: &StateSpaceModel,
    labeled: &[bool],
    mode: FilterMode,
) -> Result<FilterOutput> {
    check_lengths(trans, labeled)?;
    let n = labeled.len();
    let d = model.dim();
    let h = &model.h;

    let mut steps: Vec<StepState> = Vec::with_capacity(n);
    let mut ld = 0.0;
    let mut ld_sign = 1i32;
    let mut first_flip: Option<usize> = None;
    let mut adf_sites = SiteParams::zeros(n);
    let mut adf_logz0 = vec![0.0; n];
    let mut adf_clipped = 0usize;
    let is_adf = matches!(mode, FilterMode::Adf { .. });

    let mut m = DVector::<f64>::zeros(d);
    let mut p = model.pinf.clone();

    for i in 0..n {
        if i > 0 {
            let a = &trans.a[i - 1];
            m = a * &m;
            p = a * &p * a.transpose() + &trans.q[i - 1];
            symmetrize(&mut p);
        }
        let pred_mean = (h * &m)[(0, 0)];
        let u = (&p * h.transpose()).column(0).into_owned();
        let pred_var = (h * &u)[(0, 0)];

        let (mut z, mut c, mut gamma) = (1.0, 0.0, 0.0);
        let mut gain = DVector::zeros(d);
        if labeled[i] {
            let (b, w) = match &mode {
                FilterMode::Sites(sites) => (sites.b[i], sites.w[i]),
                FilterMode::Adf { lik, y, mean, quad } => {
                    let mm = lik.adf_moments(y[i], pred_mean + mean[i], pred_var, *quad)?;
                    if mm.clipped {
                        adf_clipped += 1;
                    }
                    let b = mm.site_b - mm.site_w * mean[i];
                    adf_sites.b[i] = b;
                    adf_sites.w[i] = mm.site_w;
                    adf_logz0[i] = mm.logz0;
                    (b, mm.site_w)
                }
            };
            z = w * pred_var + 1.0;
            if z == 0.0 || !z.is_finite() {
                return Err(Error::Numerical {
                    step: i,
                    msg: format!("innovation factor z = {z} with site precision {w}"),
                });
            }
            if z < 0.0 {
                // Exact algebra continues through a flipped factor; the
                // run is rejected below unless a later flip cancels it.
                ld_sign = -ld_sign;
                if first_flip.is_none() {
                    first_flip = Some(i);
                }
            }
            c = w * pred_mean - b;
            gamma = -c / z;
            gain = &u * (w / z);
            p -= &gain * u.transpose();
            symmetrize(&mut p);
            m += &u * gamma;
            ld += z.abs().ln();
        }
        steps.push(StepState { m: m.clone(), p: p.clone(), z, c, gamma, gain, labeled: labeled[i], pred_mean, pred_var });
    }

    if ld_sign < 0 {
        let step = first_flip.unwrap_or(0);
        return Err(Error::Numerical {
            step,
            msg: "nonpositive determinant: innovation factor flipped sign".into(),
        });
    }
    if adf_clipped > 0 {
        log::warn!("ADF clipped {adf_clipped} site precisions at zero");
    }
    Ok(FilterOutput {
        steps,
        ld,
        adf: is_adf.then_some(AdfOutput { sites: adf_sites, logz0: adf_logz0, clipped: adf_clipped }),
    })
}

/// Smoothed posterior summary.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// `alpha = gamma - W rho` per step (0 at unlabeled steps with W=0).
    pub alpha: Vec<f64>,
    /// Posterior latent means `H m_i`, centered.
    pub mean: Vec<f64>,
    /// Posterior latent variances `H P_i H^T`.
    pub var: Vec<f64>,
    /// Smoother mean increments per step (zero at the last step).
    pub dm: Vec<DVector<f64>>,
    /// `rho_i = H dm_i`.
    pub rho: Vec<f64>,
}

/// Rauch-Tung-Striebel backward pass over a completed filter run.
/// `w` are the site precisions used in the forward pass (zeros at
/// unlabeled steps).
pub fn rts_smoother(
    filter: &FilterOutput,
    trans: &DiscreteTransitions,
    model: &StateSpaceModel,
    w: &[f64],
) -> Result<SmootherOutput> {
    let n = filter.steps.len();
    if n == 0 {
        return Ok(SmootherOutput { alpha: vec![], mean: vec![], var: vec![], dm: vec![], rho: vec![] });
    }
    let d = filter.steps[0].m.len();
    let h = &model.h;

    let mut means: Vec<DVector<f64>> = filter.steps.iter().map(|s| s.m.clone()).collect();
    let mut covs: Vec<DMatrix<f64>> = filter.steps.iter().map(|s| s.p.clone()).collect();
    let mut dm = vec![DVector::<f64>::zeros(d); n];
    let mut rho = vec![0.0; n];

    for i in (1..n).rev() {
        let a = &trans.a[i - 1];
        let m_pred = a * &means[i - 1];
        let mut p_pred = a * &covs[i - 1] * a.transpose() + &trans.q[i - 1];
        symmetrize(&mut p_pred);

        // G = P_{i-1} A^T P_pred^{-1}; intermediate covariances can be
        // indefinite under negative-curvature sites, hence the LU path.
        let pa = &covs[i - 1] * a.transpose();
        let g = match nalgebra::linalg::Cholesky::new(p_pred.clone()) {
            Some(chol) => chol.solve(&pa.transpose()).transpose(),
            None => p_pred
                .clone()
                .lu()
                .solve(&pa.transpose())
                .ok_or(Error::Numerical {
                    step: i,
                    msg: "singular predicted covariance in smoother".into(),
                })?
                .transpose(),
        };

        let dmi = &g * (&means[i] - &m_pred);
        let mut pc = &covs[i - 1] + &g * (&covs[i] - &p_pred) * g.transpose();
        symmetrize(&mut pc);
        covs[i - 1] = pc;
        means[i - 1] = &means[i - 1] + &dmi;
        rho[i - 1] = (h * &dmi)[(0, 0)];
        dm[i - 1] = dmi;
    }

    // alpha = gamma - W rho; the last step keeps alpha_n = gamma_n.
    let alpha: Vec<f64> = filter
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| s.gamma - w[i] * rho[i])
        .collect();
    Ok(SmootherOutput {
        alpha,
        mean: means.iter().map(|m| (h * m)[(0, 0)]).collect(),
        var: covs.iter().map(|p| (h * p * h.transpose())[(0, 0)]).collect(),
        dm,
        rho,
    })
}

/// Gradient of `ld = sum log z_i` with respect to the kernel
/// hyperparameters at fixed sites, via a differential rerun of the
/// forward filter.
pub fn filter_ld_grad(
    trans: &DiscreteTransitions,
    model: &StateSpaceModel,
    derivs: &ModelDerivatives,
    labeled: &[bool],
    sites: &SiteParams,
) -> Result<Vec<f64>> {
    check_lengths(trans, labeled)?;
    let (da, dq) = match (&trans.da, &trans.dq) {
        (Some(da), Some(dq)) => (da, dq),
        _ => {
            return Err(Error::InvalidArgument(
                "transitions were built without derivative data".into(),
            ))
        }
    };
    let n = labeled.len();
    let d = model.dim();
    let np = derivs.n_params();
    let h = &model.h;

    let mut grad = vec![0.0; np];
    let mut m = DVector::<f64>::zeros(d);
    let mut p = model.pinf.clone();
    let mut dms: Vec<DVector<f64>> = (0..np).map(|_| DVector::zeros(d)).collect();
    let mut dps: Vec<DMatrix<f64>> = derivs.dpinf.clone();

    for i in 0..n {
        if i > 0 {
            let a = &trans.a[i - 1];
            for j in 0..np {
                let daj = &da[j][i - 1];
                dms[j] = daj * &m + a * &dms[j];
                let mut dpj = daj * &p * a.transpose() + a * &dps[j] * a.transpose()
                    + a * &p * daj.transpose()
                    + &dq[j][i - 1];
                symmetrize(&mut dpj);
                dps[j] = dpj;
            }
            m = a * &m;
            p = a * &p * a.transpose() + &trans.q[i - 1];
            symmetrize(&mut p);
        }
        if labeled[i] {
            let w = sites.w[i];
            let b = sites.b[i];
            let u = (&p * h.transpose()).column(0).into_owned();
            let s2 = (h * &u)[(0, 0)];
            let mu = (h * &m)[(0, 0)];
            let z = w * s2 + 1.0;
            if !(z > 0.0) {
                return Err(Error::Numerical { step: i, msg: format!("z = {z}") });
            }
            let c = w * mu - b;
            let gamma = -c / z;
            let k = &u * (w / z);

            for j in 0..np {
                let du = (&dps[j] * h.transpose()).column(0).into_owned();
                let ds2 = (h * &du)[(0, 0)];
                let dmu = (h * &dms[j])[(0, 0)];
                let dz = w * ds2;
                grad[j] += dz / z;
                let dc = w * dmu;
                let dgamma = -dc / z + c * dz / (z * z);
                let dk = &du * (w / z) - &u * (w * dz / (z * z));
                let mut dpj = &dps[j] - &dk * u.transpose() - &k * du.transpose();
                symmetrize(&mut dpj);
                dps[j] = dpj;
                dms[j] = &dms[j] + &du * gamma + &u * dgamma;
            }
            p -= &k * u.transpose();
            symmetrize(&mut p);
            m += &u * gamma;
        }
    }
    Ok(grad)
}

/// Gradient of the ADF evidence `sum_i log z0_i` with respect to all
/// hyperparameters: kernel parameters (through A, Q, Pinf), likelihood
/// parameters, and mean parameters (through the per-step mean values
/// `mean` with derivative rows `dmean[p]`).
#[allow(clippy::too_many_arguments)]
pub fn adf_grad(
    trans: &DiscreteTransitions,
    model: &StateSpaceModel,
    derivs: &ModelDerivatives,
    lik: &Likelihood,
    labeled: &[bool],
    y: &[f64],
    mean: &[f64],
    dmean: &[Vec<f64>],
    quad: usize,
) -> Result<Vec<f64>> {
    check_lengths(trans, labeled)?;
    let (da, dq) = match (&trans.da, &trans.dq) {
        (Some(da), Some(dq)) => (da, dq),
        _ => {
            return Err(Error::InvalidArgument(
                "transitions were built without derivative data".into(),
            ))
        }
    };
    let n = labeled.len();
    let d = model.dim();
    let nk = derivs.n_params();
    let nl = lik.n_params();
    let nm = dmean.len();
    let np = nk + nl + nm;
    let h = &model.h;

    let mut grad = vec![0.0; np];
    let mut m = DVector::<f64>::zeros(d);
    let mut p = model.pinf.clone();
    let mut dms: Vec<DVector<f64>> = (0..np).map(|_| DVector::zeros(d)).collect();
    let mut dps: Vec<DMatrix<f64>> = (0..np)
        .map(|j| if j < nk { derivs.dpinf[j].clone() } else { DMatrix::zeros(d, d) })
        .collect();

    for i in 0..n {
        if i > 0 {
            let a = &trans.a[i - 1];
            for j in 0..np {
                let mut dpj = a * &dps[j] * a.transpose();
                if j < nk {
                    let daj = &da[j][i - 1];
                    dms[j] = daj * &m + a * &dms[j];
                    dpj += daj * &p * a.transpose() + a * &p * daj.transpose() + &dq[j][i - 1];
                } else {
                    dms[j] = a * &dms[j];
                }
                symmetrize(&mut dpj);
                dps[j] = dpj;
            }
            m = a * &m;
            p = a * &p * a.transpose() + &trans.q[i - 1];
            symmetrize(&mut p);
        }
        if labeled[i] {
            let u = (&p * h.transpose()).column(0).into_owned();
            let s2 = (h * &u)[(0, 0)];
            let mu_c = (h * &m)[(0, 0)];
            let mu_f = mu_c + mean[i];

            let ad = lik.adf_derivs(y[i], mu_f, s2, quad)?;
            let (d1, d2, d3, d4) = (ad.d[0], ad.d[1], ad.d[2], ad.d[3]);
            // Heat-equation identities for the variance sensitivities.
            let dz0_ds2 = 0.5 * (d2 + d1 * d1);
            let dd1_ds2 = 0.5 * (d3 + 2.0 * d1 * d2);
            let dd2_ds2 = 0.5 * (d4 + 2.0 * d2 * d2 + 2.0 * d1 * d3);

            let den = 1.0 + s2 * d2;
            let clipped = !(den > 0.0) || -d2 / den < 0.0;
            let w = if clipped { 0.0 } else { -d2 / den };
            let b_f = if clipped { d1 } else { (d1 - mu_f * d2) / den };
            let b = b_f - w * mean[i];

            let z = w * s2 + 1.0;
            if !(z > 0.0) {
                return Err(Error::Numerical { step: i, msg: format!("z = {z}") });
            }
            let c = w * mu_c - b;
            let gamma = -c / z;
            let k = &u * (w / z);

            for j in 0..np {
                let du = (&dps[j] * h.transpose()).column(0).into_owned();
                let ds2 = (h * &du)[(0, 0)];
                let dmu_c = (h * &dms[j])[(0, 0)];
                let dmean_j = if j >= nk + nl { dmean[j - nk - nl][i] } else { 0.0 };
                let dmu_f = dmu_c + dmean_j;
                let lik_pd = (j >= nk && j < nk + nl).then(|| &ad.params[j - nk]);

                let dlogz0 = d1 * dmu_f
                    + dz0_ds2 * ds2
                    + lik_pd.map_or(0.0, |pd| pd.dlogz0);
                grad[j] += dlogz0;

                let dd1 = d2 * dmu_f + dd1_ds2 * ds2 + lik_pd.map_or(0.0, |pd| pd.dd1);
                let dd2 = d3 * dmu_f + dd2_ds2 * ds2 + lik_pd.map_or(0.0, |pd| pd.dd2);

                let (dw, db_f) = if clipped {
                    (0.0, dd1)
                } else {
                    let dden = ds2 * d2 + s2 * dd2;
                    let dw = (d2 * d2 * ds2 - dd2) / (den * den);
                    let db_f = (dd1 - dmu_f * d2 - mu_f * dd2) / den - b_f * dden / den;
                    (dw, db_f)
                };
                let db = db_f - dw * mean[i] - w * dmean_j;

                let dz = dw * s2 + w * ds2;
                let dc = dw * mu_c + w * dmu_c - db;
                let dgamma = -dc / z + c * dz / (z * z);
                let dk = &du * (w / z) + &u * (dw / z - w * dz / (z * z));
                let mut dpj = &dps[j] - &dk * u.transpose() - &k * du.transpose();
                symmetrize(&mut dpj);
                dps[j] = dpj;
                dms[j] = &dms[j] + &du * gamma + &u * dgamma;
            }
            p -= &k * u.transpose();
            symmetrize(&mut p);
            m += &u * gamma;
        }
    }
    Ok(grad)
}
