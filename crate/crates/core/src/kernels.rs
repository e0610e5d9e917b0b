//! Continuous-time state-space realizations (F, L, Qc, H, Pinf) of the
//! supported covariance functions and their hyperparameter derivatives.
//!
//! Matérn terms use the companion-form SDE realization; the stationary
//! covariance is obtained from the Lyapunov equation, so correctness
//! reduces to the covariance-reconstruction identity
//! `H exp(tau F) Pinf H^T = k(tau)` which the tests assert directly.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{expm, lyapunov_solve};

/// One additive kernel term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelTerm {
    Matern12,
    Matern32,
    Matern52,
    Constant,
}

impl KernelTerm {
    /// State dimension contributed by this term.
    pub fn state_dim(&self) -> usize {
        match self {
            KernelTerm::Matern12 | KernelTerm::Constant => 1,
            KernelTerm::Matern32 => 2,
            KernelTerm::Matern52 => 3,
        }
    }

    /// Number of hyperparameters: `[log_ell, log_sigma_f]` for Matérn
    /// terms, `[log_sigma_f]` for the constant term.
    pub fn n_params(&self) -> usize {
        match self {
            KernelTerm::Constant => 1,
            _ => 2,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            KernelTerm::Matern12 => "matern12",
            KernelTerm::Matern32 => "matern32",
            KernelTerm::Matern52 => "matern52",
            KernelTerm::Constant => "constant",
        }
    }
}

/// Sum-of-terms kernel specification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSpec {
    pub terms: Vec<KernelTerm>,
}

impl KernelSpec {
    /// Parse a specification string such as `matern32` or
    /// `matern52+constant`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for part in s.split('+') {
            let term = match part.trim() {
                "matern12" => KernelTerm::Matern12,
                "matern32" => KernelTerm::Matern32,
                "matern52" => KernelTerm::Matern52,
                "constant" => KernelTerm::Constant,
                other => return Err(Error::UnsupportedKernel(other.to_string())),
            };
            terms.push(term);
        }
        if terms.is_empty() {
            return Err(Error::UnsupportedKernel("empty kernel spec".into()));
        }
        Ok(KernelSpec { terms })
    }

    pub fn n_params(&self) -> usize {
        self.terms.iter().map(|t| t.n_params()).sum()
    }

    pub fn state_dim(&self) -> usize {
        self.terms.iter().map(|t| t.state_dim()).sum()
    }

    /// Hyperparameter names, one per entry of `HyperParams::kernel`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, t) in self.terms.iter().enumerate() {
            let prefix = format!("k{}.{}", i + 1, t.name());
            if t.n_params() == 2 {
                names.push(format!("{prefix}.log_ell"));
            }
            names.push(format!("{prefix}.log_sf"));
        }
        names
    }
}

impl std::fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.terms.iter().map(|t| t.name()).collect();
        write!(f, "{}", names.join("+"))
    }
}

/// Model hyperparameters. Positive quantities live in log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Per kernel term, aligned with `KernelSpec::terms`:
    /// `[log_ell, log_sigma_f]` for Matérn, `[log_sigma_f]` for constant.
    pub kernel: Vec<f64>,
    /// Log-domain likelihood parameters (e.g. `[log_sigma_n]`).
    pub likelihood: Vec<f64>,
    /// Linear mean `m(t) = a t + d` stored as `[a, d]`.
    pub mean: [f64; 2],
}

impl HyperParams {
    pub fn new(kernel: Vec<f64>, likelihood: Vec<f64>) -> Self {
        HyperParams { kernel, likelihood, mean: [0.0, 0.0] }
    }

    /// Unit defaults: all log parameters zero except a noise scale of 0.1.
    pub fn default_for(spec: &KernelSpec, n_lik_params: usize) -> Self {
        let mut lik = vec![0.0; n_lik_params];
        if n_lik_params > 0 {
            lik[0] = 0.1f64.ln();
        }
        HyperParams { kernel: vec![0.0; spec.n_params()], likelihood: lik, mean: [0.0, 0.0] }
    }

    pub fn mean_at(&self, t: f64) -> f64 {
        self.mean[0] * t + self.mean[1]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.kernel.iter().chain(self.likelihood.iter()).chain(self.mean.iter());
        for v in all {
            if !v.is_finite() {
                return Err(Error::InvalidArgument("non-finite hyperparameter".into()));
            }
        }
        Ok(())
    }
}

/// Continuous-time LTI realization of a covariance function.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    /// Feedback matrix, d x d.
    pub f: DMatrix<f64>,
    /// Noise effect matrix, d x s.
    pub l: DMatrix<f64>,
    /// White-noise spectral density, s x s.
    pub qc: DMatrix<f64>,
    /// Measurement matrix, 1 x d.
    pub h: DMatrix<f64>,
    /// Stationary covariance; for nonstationary terms the initial
    /// covariance P0 takes its place.
    pub pinf: DMatrix<f64>,
    /// Whether the model has a stationary distribution.
    pub stationary: bool,
}

impl StateSpaceModel {
    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn noise_dim(&self) -> usize {
        self.l.ncols()
    }

    /// Prior latent variance `H Pinf H^T`.
    pub fn prior_var(&self) -> f64 {
        (&self.h * &self.pinf * self.h.transpose())[(0, 0)]
    }

    /// Matérn realization for half-integer `nu` in {1/2, 3/2, 5/2}.
    pub fn matern(nu: f64, sigma_f: f64, ell: f64) -> Result<Self> {
        if !(sigma_f.is_finite() && sigma_f > 0.0 && ell.is_finite() && ell > 0.0) {
            return Err(Error::InvalidArgument(
                "sigma_f and ell must be finite and positive".into(),
            ));
        }
        let d = if nu == 0.5 {
            1
        } else if nu == 1.5 {
            2
        } else if nu == 2.5 {
            3
        } else {
            return Err(Error::UnsupportedKernel(format!("matern nu={nu}")));
        };
        let lambda = (2.0 * nu).sqrt() / ell;

        // Companion form: last row carries -binom(d, j) lambda^(d-j).
        let mut f = DMatrix::zeros(d, d);
        for i in 0..d.saturating_sub(1) {
            f[(i, i + 1)] = 1.0;
        }
        for j in 0..d {
            f[(d - 1, j)] = -binom(d, j) * lambda.powi((d - j) as i32);
        }

        let mut l = DMatrix::zeros(d, 1);
        l[(d - 1, 0)] = 1.0;

        let qc_scale = spectral_density_scale(nu);
        let qc = DMatrix::from_element(1, 1, sigma_f * sigma_f * qc_scale * lambda.powf(2.0 * nu));

        let mut h = DMatrix::zeros(1, d);
        h[(0, 0)] = 1.0;

        let sigma = &l * &qc * l.transpose();
        let pinf = lyapunov_solve(&f, &sigma)?;
        Ok(StateSpaceModel { f, l, qc, h, pinf, stationary: true })
    }

    /// Constant kernel: single state with zero dynamics, explicit P0.
    pub fn constant(sigma_f: f64) -> Result<Self> {
        if !(sigma_f.is_finite() && sigma_f > 0.0) {
            return Err(Error::InvalidArgument("sigma_f must be finite and positive".into()));
        }
        Ok(StateSpaceModel {
            f: DMatrix::zeros(1, 1),
            l: DMatrix::from_element(1, 1, 1.0),
            qc: DMatrix::zeros(1, 1),
            h: DMatrix::from_element(1, 1, 1.0),
            pinf: DMatrix::from_element(1, 1, sigma_f * sigma_f),
            stationary: false,
        })
    }

    /// Block-diagonal stacking of several models; H is the horizontal
    /// concatenation so the latent processes add.
    pub fn sum(models: Vec<StateSpaceModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("sum of zero models".into()));
        }
        if models.len() == 1 {
            return Ok(models.into_iter().next().unwrap());
        }
        let d: usize = models.iter().map(|m| m.dim()).sum();
        let s: usize = models.iter().map(|m| m.noise_dim()).sum();
        let mut f = DMatrix::zeros(d, d);
        let mut l = DMatrix::zeros(d, s);
        let mut qc = DMatrix::zeros(s, s);
        let mut h = DMatrix::zeros(1, d);
        let mut pinf = DMatrix::zeros(d, d);
        let stationary = models.iter().all(|m| m.stationary);
        let (mut od, mut os) = (0, 0);
        for m in &models {
            let (md, ms) = (m.dim(), m.noise_dim());
            f.view_mut((od, od), (md, md)).copy_from(&m.f);
            l.view_mut((od, os), (md, ms)).copy_from(&m.l);
            qc.view_mut((os, os), (ms, ms)).copy_from(&m.qc);
            h.view_mut((0, od), (1, md)).copy_from(&m.h);
            pinf.view_mut((od, od), (md, md)).copy_from(&m.pinf);
            od += md;
            os += ms;
        }
        Ok(StateSpaceModel { f, l, qc, h, pinf, stationary })
    }
}

fn binom(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k.min(n - k) {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// `2 sqrt(pi) Gamma(nu + 1/2) / Gamma(nu)` for the half-integer cases.
fn spectral_density_scale(nu: f64) -> f64 {
    if nu == 0.5 {
        2.0
    } else if nu == 1.5 {
        4.0
    } else {
        16.0 / 3.0
    }
}

/// Per-hyperparameter derivatives of the model matrices, aligned with
/// `HyperParams::kernel`. `dH` vanishes for every supported kernel.
#[derive(Debug, Clone)]
pub struct ModelDerivatives {
    pub df: Vec<DMatrix<f64>>,
    pub dqc: Vec<DMatrix<f64>>,
    pub dpinf: Vec<DMatrix<f64>>,
}

impl ModelDerivatives {
    pub fn n_params(&self) -> usize {
        self.df.len()
    }
}

/// Build the state-space model for a kernel specification.
pub fn build_model(spec: &KernelSpec, hypers: &HyperParams) -> Result<StateSpaceModel> {
    let models = term_models(spec, hypers)?;
    StateSpaceModel::sum(models)
}

/// Build the model together with derivatives of (F, Qc, Pinf) with
/// respect to each log-domain kernel hyperparameter.
pub fn build_with_derivatives(
    spec: &KernelSpec,
    hypers: &HyperParams,
) -> Result<(StateSpaceModel, ModelDerivatives)> {
    let models = term_models(spec, hypers)?;
    let d: usize = models.iter().map(|m| m.dim()).sum();
    let s: usize = models.iter().map(|m| m.noise_dim()).sum();

    let mut df = Vec::new();
    let mut dqc = Vec::new();
    let mut dpinf = Vec::new();
    let (mut od, mut os) = (0, 0);
    for (term, m) in spec.terms.iter().zip(&models) {
        let (md, ms) = (m.dim(), m.noise_dim());
        match term {
            KernelTerm::Constant => {
                // Only log_sigma_f: Pinf scales as sigma_f^2.
                df.push(DMatrix::zeros(d, d));
                dqc.push(DMatrix::zeros(s, s));
                let mut dp = DMatrix::zeros(d, d);
                dp.view_mut((od, od), (md, md)).copy_from(&(&m.pinf * 2.0));
                dpinf.push(dp);
            }
            _ => {
                let nu = match term {
                    KernelTerm::Matern12 => 0.5,
                    KernelTerm::Matern32 => 1.5,
                    _ => 2.5,
                };
                // log_ell: last-row entry with power (d-j) of lambda picks
                // up a factor -(d-j); Qc scales with lambda^(2 nu).
                let mut df_ell_t = DMatrix::zeros(md, md);
                for j in 0..md {
                    df_ell_t[(md - 1, j)] = -((md - j) as f64) * m.f[(md - 1, j)];
                }
                let dqc_ell_t = &m.qc * (-2.0 * nu);
                let rhs = &df_ell_t * &m.pinf
                    + &m.pinf * df_ell_t.transpose()
                    + &m.l * &dqc_ell_t * m.l.transpose();
                let dpinf_ell_t = lyapunov_solve(&m.f, &rhs)?;

                let mut df_ell = DMatrix::zeros(d, d);
                df_ell.view_mut((od, od), (md, md)).copy_from(&df_ell_t);
                let mut dqc_ell = DMatrix::zeros(s, s);
                dqc_ell.view_mut((os, os), (ms, ms)).copy_from(&dqc_ell_t);
                let mut dpinf_ell = DMatrix::zeros(d, d);
                dpinf_ell.view_mut((od, od), (md, md)).copy_from(&dpinf_ell_t);
                df.push(df_ell);
                dqc.push(dqc_ell);
                dpinf.push(dpinf_ell);

                // log_sigma_f: Qc and Pinf scale as sigma_f^2, F is free of it.
                df.push(DMatrix::zeros(d, d));
                let mut dqc_sf = DMatrix::zeros(s, s);
                dqc_sf.view_mut((os, os), (ms, ms)).copy_from(&(&m.qc * 2.0));
                dqc.push(dqc_sf);
                let mut dpinf_sf = DMatrix::zeros(d, d);
                dpinf_sf.view_mut((od, od), (md, md)).copy_from(&(&m.pinf * 2.0));
                dpinf.push(dpinf_sf);
            }
        }
        od += md;
        os += ms;
    }
    let model = StateSpaceModel::sum(models)?;
    Ok((model, ModelDerivatives { df, dqc, dpinf }))
}

fn term_models(spec: &KernelSpec, hypers: &HyperParams) -> Result<Vec<StateSpaceModel>> {
    hypers.validate()?;
    if hypers.kernel.len() != spec.n_params() {
        return Err(Error::InvalidArgument(format!(
            "kernel spec expects {} hyperparameters, got {}",
            spec.n_params(),
            hypers.kernel.len()
        )));
    }
    let mut models = Vec::with_capacity(spec.terms.len());
    let mut off = 0;
    for term in &spec.terms {
        match term {
            KernelTerm::Constant => {
                let sf = hypers.kernel[off].exp();
                models.push(StateSpaceModel::constant(sf)?);
                off += 1;
            }
            t => {
                let ell = hypers.kernel[off].exp();
                let sf = hypers.kernel[off + 1].exp();
                let nu = match t {
                    KernelTerm::Matern12 => 0.5,
                    KernelTerm::Matern32 => 1.5,
                    _ => 2.5,
                };
                models.push(StateSpaceModel::matern(nu, sf, ell)?);
                off += 2;
            }
        }
    }
    Ok(models)
}

/// Closed-form stationary covariance `k(tau)` of the kernel; used by the
/// dense oracle and the reconstruction tests.
pub fn covariance(spec: &KernelSpec, hypers: &HyperParams, tau: f64) -> f64 {
    let tau = tau.abs();
    let mut off = 0;
    let mut total = 0.0;
    for term in &spec.terms {
        match term {
            KernelTerm::Constant => {
                let sf2 = (2.0 * hypers.kernel[off]).exp();
                total += sf2;
                off += 1;
            }
            t => {
                let ell = hypers.kernel[off].exp();
                let sf2 = (2.0 * hypers.kernel[off + 1]).exp();
                let r = tau / ell;
                total += match t {
                    KernelTerm::Matern12 => sf2 * (-r).exp(),
                    KernelTerm::Matern32 => {
                        let s = 3f64.sqrt() * r;
                        sf2 * (1.0 + s) * (-s).exp()
                    }
                    _ => {
                        let s = 5f64.sqrt() * r;
                        sf2 * (1.0 + s + s * s / 3.0) * (-s).exp()
                    }
                };
                off += 2;
            }
        }
    }
    total
}

/// Reconstruct `k(tau)` from the state-space model: `H exp(tau F) Pinf H^T`.
pub fn reconstructed_covariance(model: &StateSpaceModel, tau: f64) -> Result<f64> {
    let a = expm(&(&model.f * tau))?;
    Ok((&model.h * a * &model.pinf * model.h.transpose())[(0, 0)])
}
