//! Uniform likelihood interface: log densities with derivatives, ADF
//! moment matching, variational-bound (VB) dual sites, and convolved
//! likelihoods for KL inference.
//!
//! All positive likelihood parameters live in log domain. Moment and
//! convolution integrals use Gauss-Hermite quadrature unless an analytic
//! form exists (Gaussian, erf).

pub mod ghq;
mod normal;

pub use ghq::DEFAULT_ORDER;

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use normal::{log_cdf, mills_ratio, LN_2PI};

/// Supported observation models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodKind {
    Gaussian,
    StudentT,
    Poisson,
    Logistic,
    Erf,
}

impl LikelihoodKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian" => Ok(LikelihoodKind::Gaussian),
            "studentt" => Ok(LikelihoodKind::StudentT),
            "poisson" => Ok(LikelihoodKind::Poisson),
            "logistic" => Ok(LikelihoodKind::Logistic),
            "erf" => Ok(LikelihoodKind::Erf),
            other => Err(Error::InvalidArgument(format!("unknown likelihood: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodKind::Gaussian => "gaussian",
            LikelihoodKind::StudentT => "studentt",
            LikelihoodKind::Poisson => "poisson",
            LikelihoodKind::Logistic => "logistic",
            LikelihoodKind::Erf => "erf",
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            LikelihoodKind::Gaussian => 1,
            LikelihoodKind::StudentT => 2,
            _ => 0,
        }
    }

    /// Log-domain defaults: noise scale 0.1; one degree of freedom for
    /// Student's t.
    pub fn default_params(&self) -> Vec<f64> {
        match self {
            LikelihoodKind::Gaussian => vec![0.1f64.ln()],
            LikelihoodKind::StudentT => vec![0.1f64.ln(), 0.0],
            _ => vec![],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            LikelihoodKind::Gaussian => vec!["lik.log_sn".into()],
            LikelihoodKind::StudentT => vec!["lik.log_sn".into(), "lik.log_nu".into()],
            _ => vec![],
        }
    }
}

impl std::fmt::Display for LikelihoodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A likelihood kind bound to concrete (log-domain) parameter values.
#[derive(Debug, Clone)]
pub struct Likelihood {
    pub kind: LikelihoodKind,
    pub params: Vec<f64>,
}

/// Log density and its derivatives in the latent function value.
#[derive(Debug, Clone, Copy)]
pub struct LikEval {
    pub logp: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

/// Partial derivatives with respect to one log-domain likelihood
/// parameter, at fixed latent value.
#[derive(Debug, Clone, Copy)]
pub struct LikParamDeriv {
    pub dlogp: f64,
    pub dd1: f64,
    pub dd2: f64,
}

/// Moment-matched Gaussian site for ADF.
#[derive(Debug, Clone, Copy)]
pub struct MomentMatch {
    /// Log zeroth moment of the tilted distribution.
    pub logz0: f64,
    /// Site natural location (in the uncentered latent).
    pub site_b: f64,
    /// Site precision, clipped at zero when moment matching would turn
    /// it negative.
    pub site_w: f64,
    pub clipped: bool,
}

/// Derivatives of `log z0` in the cavity mean, plus parameter partials;
/// consumed by the differential ADF filter.
#[derive(Debug, Clone)]
pub struct AdfDerivs {
    pub logz0: f64,
    /// d^k log z0 / d mu^k for k = 1..4.
    pub d: [f64; 4],
    pub params: Vec<AdfParamDeriv>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdfParamDeriv {
    pub dlogz0: f64,
    pub dd1: f64,
    pub dd2: f64,
}

/// Smoothed likelihood values for the variational bound at one site.
#[derive(Debug, Clone, Copy)]
pub struct VbSite {
    /// Likelihood-specific offset (y for Student's t and Gaussian, 0 for
    /// logistic).
    pub z: f64,
    /// Likelihood-specific linear coefficient (0, or y/2 for logistic).
    pub b: f64,
    /// Smoothed latent g = z + sqrt((f-z)^2 + v).
    pub g: f64,
    /// Bound value l_VB(f) and its first two derivatives in f.
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    /// Dual curvature; nonnegative for super-Gaussian likelihoods.
    pub site_w: f64,
}

/// Convolved likelihood value and derivatives in the marginal mean.
#[derive(Debug, Clone, Copy)]
pub struct KlEval {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Likelihood {
    pub fn new(kind: LikelihoodKind, params: Vec<f64>) -> Result<Self> {
        if params.len() != kind.n_params() {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} parameters, got {}",
                kind.name(),
                kind.n_params(),
                params.len()
            )));
        }
        Ok(Likelihood { kind, params })
    }

    pub fn with_defaults(kind: LikelihoodKind) -> Self {
        Likelihood { kind, params: kind.default_params() }
    }

    pub fn n_params(&self) -> usize {
        self.kind.n_params()
    }

    fn sigma_n2(&self) -> f64 {
        (2.0 * self.params[0]).exp()
    }

    fn nu(&self) -> f64 {
        self.params[1].exp()
    }

    /// All W from `-d2` stay nonnegative for these likelihoods.
    pub fn log_concave(&self) -> bool {
        !matches!(self.kind, LikelihoodKind::StudentT)
    }

    /// Validate an observation against the likelihood support.
    pub fn check_support(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::Domain("non-finite observation".into()));
        }
        match self.kind {
            LikelihoodKind::Poisson => {
                if y < 0.0 || (y - y.round()).abs() > 1e-9 {
                    return Err(Error::Domain(format!("Poisson counts must be nonnegative integers, got {y}")));
                }
            }
            LikelihoodKind::Logistic | LikelihoodKind::Erf => {
                if (y - 1.0).abs() > 1e-12 && (y + 1.0).abs() > 1e-12 {
                    return Err(Error::Domain(format!("class labels must be -1 or +1, got {y}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Log density and derivatives in `f` up to third order.
    pub fn eval(&self, y: f64, f: f64) -> LikEval {
        match self.kind {
            LikelihoodKind::Gaussian => {
                let s2 = self.sigma_n2();
                let r = y - f;
                LikEval {
                    logp: -0.5 * (r * r / s2 + LN_2PI + s2.ln()),
                    d1: r / s2,
                    d2: -1.0 / s2,
                    d3: 0.0,
                }
            }
            LikelihoodKind::StudentT => {
                let s2 = self.sigma_n2();
                let nu = self.nu();
                let r = y - f;
                let u = nu * s2 + r * r;
                let logp = ln_gamma((nu + 1.0) / 2.0)
                    - ln_gamma(nu / 2.0)
                    - 0.5 * (nu * std::f64::consts::PI * s2).ln()
                    - 0.5 * (nu + 1.0) * (u / (nu * s2)).ln();
                LikEval {
                    logp,
                    d1: (nu + 1.0) * r / u,
                    d2: (nu + 1.0) * (r * r - nu * s2) / (u * u),
                    d3: 2.0 * r * (nu + 1.0) * (r * r - 3.0 * nu * s2) / (u * u * u),
                }
            }
            LikelihoodKind::Poisson => {
                let ef = f.exp();
                LikEval {
                    logp: y * f - ef - ln_gamma(y + 1.0),
                    d1: y - ef,
                    d2: -ef,
                    d3: -ef,
                }
            }
            LikelihoodKind::Logistic => {
                let x = y * f;
                // log sigma(x), computed without overflow
                let logp = if x > 0.0 { -(-x).exp().ln_1p() } else { x - x.exp().ln_1p() };
                let s = 1.0 / (1.0 + (-x).exp());
                LikEval {
                    logp,
                    d1: y * (1.0 - s),
                    d2: -s * (1.0 - s),
                    d3: -y * (1.0 - 2.0 * s) * s * (1.0 - s),
                }
            }
            LikelihoodKind::Erf => {
                let z = y * f;
                let r = mills_ratio(z);
                LikEval {
                    logp: log_cdf(z),
                    d1: y * r,
                    d2: -r * (r + z),
                    d3: y * r * ((z + 2.0 * r) * (z + r) - 1.0),
                }
            }
        }
    }

    /// Derivatives of (logp, d1, d2) in each log-domain likelihood
    /// parameter at fixed `f`.
    pub fn param_derivs(&self, y: f64, f: f64) -> Vec<LikParamDeriv> {
        match self.kind {
            LikelihoodKind::Gaussian => {
                let s2 = self.sigma_n2();
                let r = y - f;
                vec![LikParamDeriv {
                    dlogp: r * r / s2 - 1.0,
                    dd1: -2.0 * r / s2,
                    dd2: 2.0 / s2,
                }]
            }
            LikelihoodKind::StudentT => {
                let s2 = self.sigma_n2();
                let nu = self.nu();
                let r = y - f;
                let u = nu * s2 + r * r;
                let dlogp_lsn = -1.0 + (nu + 1.0) * r * r / u;
                let dd1_lsn = -2.0 * nu * s2 * (nu + 1.0) * r / (u * u);
                let dd2_lsn = 2.0 * s2 * nu * (nu + 1.0) * (nu * s2 - 3.0 * r * r) / (u * u * u);

                let dlogp_nu = 0.5 * digamma((nu + 1.0) / 2.0) - 0.5 * digamma(nu / 2.0)
                    - 0.5 / nu
                    - 0.5 * (u / (nu * s2)).ln()
                    - 0.5 * (nu + 1.0) * (s2 / u - 1.0 / nu);
                let dd1_nu = r * (u - (nu + 1.0) * s2) / (u * u);
                let dd2_nu = ((r * r - nu * s2) - (nu + 1.0) * s2) / (u * u)
                    - 2.0 * s2 * (nu + 1.0) * (r * r - nu * s2) / (u * u * u);
                vec![
                    LikParamDeriv { dlogp: dlogp_lsn, dd1: dd1_lsn, dd2: dd2_lsn },
                    LikParamDeriv { dlogp: nu * dlogp_nu, dd1: nu * dd1_nu, dd2: nu * dd2_nu },
                ]
            }
            _ => vec![],
        }
    }

    /// Central moments of the tilted distribution about the cavity mean,
    /// computed with a numerically stabilized Gauss-Hermite sum. Returns
    /// `(logz0, c1, c2, c3, c4)`; higher moments are zero-filled when
    /// `upto < 4`.
    fn tilted_moments(&self, y: f64, mu: f64, s2: f64, order: usize, upto: usize) -> Result<(f64, [f64; 4])> {
        let table = ghq::nodes(order);
        let sqrt2s = (2.0 * s2).sqrt();
        let mut g = Vec::with_capacity(table.len());
        let mut gmax = f64::NEG_INFINITY;
        for &(x, w) in table.iter() {
            let f = mu + sqrt2s * x;
            let v = w.ln() + self.eval(y, f).logp;
            gmax = gmax.max(v);
            g.push((f, v));
        }
        if !gmax.is_finite() {
            return Err(Error::Numerical { step: 0, msg: "quadrature produced non-finite weights".into() });
        }
        let mut z = 0.0;
        let mut c = [0.0f64; 4];
        for &(f, v) in &g {
            let p = (v - gmax).exp();
            z += p;
            let df = f - mu;
            let mut pow = p;
            for m in 0..upto {
                pow *= df;
                c[m] += pow;
            }
        }
        for m in 0..upto {
            c[m] /= z;
        }
        let logz0 = gmax + z.ln() - 0.5 * std::f64::consts::PI.ln();
        if !logz0.is_finite() {
            return Err(Error::Numerical { step: 0, msg: "non-finite tilted normalizer".into() });
        }
        Ok((logz0, c))
    }

    /// Convert `(logz0, d1, d2)` into a moment-matched Gaussian site.
    fn site_from_derivs(mu: f64, s2: f64, logz0: f64, d1: f64, d2: f64) -> MomentMatch {
        let den = 1.0 + s2 * d2;
        let w = -d2 / den;
        if !(den > 0.0) || !w.is_finite() || w < 0.0 {
            // Mean-matching fallback with zero precision.
            return MomentMatch { logz0, site_b: d1, site_w: 0.0, clipped: true };
        }
        MomentMatch { logz0, site_b: (d1 - mu * d2) / den, site_w: w, clipped: false }
    }

    /// Match the first two moments of the tilted distribution
    /// `P(y|f) N(f|mu, s2)` with a Gaussian site `exp(b f - W f^2 / 2)`.
    pub fn adf_moments(&self, y: f64, mu: f64, s2: f64, order: usize) -> Result<MomentMatch> {
        if !(s2 > 0.0) {
            return Err(Error::InvalidArgument("cavity variance must be positive".into()));
        }
        match self.kind {
            LikelihoodKind::Gaussian => {
                let sn2 = self.sigma_n2();
                let s = s2 + sn2;
                let r = y - mu;
                let logz0 = -0.5 * (r * r / s + LN_2PI + s.ln());
                Ok(Self::site_from_derivs(mu, s2, logz0, r / s, -1.0 / s))
            }
            LikelihoodKind::Erf => {
                let c = (1.0 + s2).sqrt();
                let w = y * mu / c;
                let r = mills_ratio(w);
                let d1 = y * r / c;
                let d2 = -r * (w + r) / (c * c);
                Ok(Self::site_from_derivs(mu, s2, log_cdf(w), d1, d2))
            }
            _ => {
                let (logz0, c) = self.tilted_moments(y, mu, s2, order, 2)?;
                let d1 = c[0] / s2;
                let d2 = (c[1] - c[0] * c[0]) / (s2 * s2) - 1.0 / s2;
                Ok(Self::site_from_derivs(mu, s2, logz0, d1, d2))
            }
        }
    }

    /// `log z0` and its cavity-mean derivatives up to fourth order, plus
    /// likelihood-parameter partials of `(log z0, d1, d2)`.
    pub fn adf_derivs(&self, y: f64, mu: f64, s2: f64, order: usize) -> Result<AdfDerivs> {
        match self.kind {
            LikelihoodKind::Gaussian => {
                let sn2 = self.sigma_n2();
                let s = s2 + sn2;
                let r = y - mu;
                let logz0 = -0.5 * (r * r / s + LN_2PI + s.ln());
                let dp = AdfParamDeriv {
                    dlogz0: sn2 * (r * r / (s * s) - 1.0 / s),
                    dd1: -2.0 * sn2 * r / (s * s),
                    dd2: 2.0 * sn2 / (s * s),
                };
                Ok(AdfDerivs { logz0, d: [r / s, -1.0 / s, 0.0, 0.0], params: vec![dp] })
            }
            LikelihoodKind::Erf => {
                let c = (1.0 + s2).sqrt();
                let w = y * mu / c;
                let r = mills_ratio(w);
                let r1 = -(w * r + r * r);
                let k = (w + 2.0 * r) * (w + r) - 1.0;
                let r2 = r * k;
                let r3 = r1 * k + r * ((1.0 + 2.0 * r1) * (w + r) + (w + 2.0 * r) * (1.0 + r1));
                Ok(AdfDerivs {
                    logz0: log_cdf(w),
                    d: [y * r / c, r1 / (c * c), y * r2 / (c * c * c), r3 / (c * c * c * c)],
                    params: vec![],
                })
            }
            _ => {
                let (logz0, c) = self.tilted_moments(y, mu, s2, order, 4)?;
                let s4 = s2 * s2;
                let k2 = c[1] - c[0] * c[0];
                let k3 = c[2] - 3.0 * c[0] * c[1] + 2.0 * c[0].powi(3);
                let k4 = c[3] - 4.0 * c[0] * c[2] - 3.0 * c[1] * c[1]
                    + 12.0 * c[0] * c[0] * c[1]
                    - 6.0 * c[0].powi(4);
                let d = [c[0] / s2, k2 / s4 - 1.0 / s2, k3 / (s4 * s2), k4 / (s4 * s4)];

                let mut params = Vec::new();
                if self.n_params() > 0 {
                    // dE_t[g]/dtheta = Cov_t(g, dl/dtheta)
                    let table = ghq::nodes(order);
                    let sqrt2s = (2.0 * s2).sqrt();
                    let mut z = 0.0;
                    let mut e = vec![[0.0f64; 3]; self.n_params()];
                    let mut gmax = f64::NEG_INFINITY;
                    let mut rows = Vec::with_capacity(table.len());
                    for &(x, w) in table.iter() {
                        let f = mu + sqrt2s * x;
                        let v = w.ln() + self.eval(y, f).logp;
                        gmax = gmax.max(v);
                        rows.push((f, v));
                    }
                    for &(f, v) in &rows {
                        let p = (v - gmax).exp();
                        z += p;
                        let df = f - mu;
                        for (j, pd) in self.param_derivs(y, f).iter().enumerate() {
                            e[j][0] += p * pd.dlogp;
                            e[j][1] += p * pd.dlogp * df;
                            e[j][2] += p * pd.dlogp * df * df;
                        }
                    }
                    for j in 0..self.n_params() {
                        let e0 = e[j][0] / z;
                        let e1 = e[j][1] / z;
                        let e2 = e[j][2] / z;
                        let dc1 = e1 - c[0] * e0;
                        let dc2 = e2 - c[1] * e0;
                        params.push(AdfParamDeriv {
                            dlogz0: e0,
                            dd1: dc1 / s2,
                            dd2: (dc2 - 2.0 * c[0] * dc1) / s4,
                        });
                    }
                }
                Ok(AdfDerivs { logz0, d, params })
            }
        }
    }

    /// Variational-bound offsets `(z, b)` for super-Gaussian likelihoods.
    fn vb_offsets(&self, y: f64) -> Result<(f64, f64)> {
        match self.kind {
            LikelihoodKind::Gaussian | LikelihoodKind::StudentT => Ok((y, 0.0)),
            LikelihoodKind::Logistic => Ok((0.0, y / 2.0)),
            other => Err(Error::UnsupportedInference(format!(
                "likelihood {} is not super-Gaussian; VB unavailable",
                other.name()
            ))),
        }
    }

    /// Smoothed likelihood `l_VB(f) = l(g) + b (f - g)` with
    /// `g = z + sqrt((f - z)^2 + v)`, its derivatives, and the dual
    /// curvature site.
    pub fn vb_site(&self, y: f64, f: f64, v: f64) -> Result<VbSite> {
        if v < 0.0 {
            return Err(Error::InvalidArgument("marginal variance must be nonnegative".into()));
        }
        let (z, b) = self.vb_offsets(y)?;
        let u = f - z;
        let s = (u * u + v).sqrt();
        let g = z + s;
        let ev = self.eval(y, g);
        // psi(s) = l(z+s) - b (z+s): even extension of the residual
        let psi1 = ev.d1 - b;
        let psi2 = ev.d2;
        if s < 1e-300 {
            // Exactly at the symmetry point with zero smoothing.
            let at = self.eval(y, f);
            return Ok(VbSite { z, b, g: f, value: at.logp, d1: at.d1, d2: at.d2, site_w: -at.d2 });
        }
        let site_w = -psi1 / s;
        let value = ev.logp - b * g + b * f;
        let d1 = b - site_w * u;
        let d2 = psi2 * (u * u) / (s * s) + psi1 * v / (s * s * s);
        Ok(VbSite { z, b, g, value, d1, d2, site_w })
    }

    /// Convolved likelihood `l_KL(mu) = E_{N(mu, v)}[l(f)]` with its
    /// first two derivatives in `mu`.
    pub fn kl_convolved(&self, y: f64, mu: f64, v: f64, order: usize) -> Result<KlEval> {
        if v < 0.0 {
            return Err(Error::InvalidArgument("marginal variance must be nonnegative".into()));
        }
        if v == 0.0 {
            let e = self.eval(y, mu);
            return Ok(KlEval { value: e.logp, d1: e.d1, d2: e.d2 });
        }
        if self.kind == LikelihoodKind::Gaussian {
            let s2 = self.sigma_n2();
            let r = y - mu;
            return Ok(KlEval {
                value: -0.5 * ((r * r + v) / s2 + LN_2PI + s2.ln()),
                d1: r / s2,
                d2: -1.0 / s2,
            });
        }
        let (mut value, mut d1, mut d2) = (0.0, 0.0, 0.0);
        let table = ghq::nodes(order);
        let sqrt2v = (2.0 * v).sqrt();
        for &(x, w) in table.iter() {
            let e = self.eval(y, mu + sqrt2v * x);
            value += w * e.logp;
            d1 += w * e.d1;
            d2 += w * e.d2;
        }
        let c = std::f64::consts::PI.sqrt();
        let out = KlEval { value: value / c, d1: d1 / c, d2: d2 / c };
        if !out.value.is_finite() || !out.d1.is_finite() || !out.d2.is_finite() {
            return Err(Error::Numerical { step: 0, msg: "non-finite convolved likelihood".into() });
        }
        Ok(out)
    }

    /// Predictive log density `log int P(y|f) N(f|mu, s2) df`.
    pub fn log_predictive(&self, y: f64, mu: f64, s2: f64, order: usize) -> Result<f64> {
        Ok(self.adf_moments(y, mu, s2, order)?.logz0)
    }
}
