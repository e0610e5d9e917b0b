//! Conversion of a continuous-time model plus sorted time stamps into
//! per-gap discrete transitions (A_i, Q_i) and their hyperparameter
//! derivatives, either exactly or through cubic convolution interpolation
//! on an equispaced grid of precomputed matrix exponentials.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::{ModelDerivatives, StateSpaceModel};
use crate::linalg::{expm, expm_deriv, symmetrize};

/// Relative tolerance under which two gaps are treated as equal, so
/// regular grids cost a single matrix exponential.
const DEDUP_RTOL: f64 = 1e-12;

/// How the transitions were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionMode {
    Exact,
    Interpolated(usize),
}

/// Per-gap discrete transition matrices and optional derivatives.
#[derive(Debug, Clone)]
pub struct DiscreteTransitions {
    /// Gaps between consecutive steps; `a[i]` carries step `i` to `i+1`.
    pub dts: Vec<f64>,
    pub a: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    /// Derivatives indexed `[param][gap]`, aligned with the kernel
    /// hyperparameters of the model they were built from.
    pub da: Option<Vec<Vec<DMatrix<f64>>>>,
    pub dq: Option<Vec<Vec<DMatrix<f64>>>>,
    pub mode: TransitionMode,
}

impl DiscreteTransitions {
    pub fn len(&self) -> usize {
        self.dts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dts.is_empty()
    }

    pub fn has_derivatives(&self) -> bool {
        self.da.is_some()
    }
}

/// Interpolation settings; `k` is the number of grid nodes.
#[derive(Debug, Clone, Copy)]
pub struct InterpOptions {
    pub enabled: bool,
    pub k: usize,
}

impl Default for InterpOptions {
    fn default() -> Self {
        InterpOptions { enabled: false, k: 2000 }
    }
}

/// One evaluated node of the interpolation grid.
#[derive(Debug, Clone)]
struct GridNode {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    da: Vec<DMatrix<f64>>,
    dq: Vec<DMatrix<f64>>,
}

/// Equispaced grid of precomputed transitions over the gap range.
#[derive(Debug, Clone)]
pub struct InterpGrid {
    s0: f64,
    ds: f64,
    nodes: Vec<GridNode>,
    model: StateSpaceModel,
    derivs: Option<ModelDerivatives>,
}

impl InterpGrid {
    pub fn k(&self) -> usize {
        self.nodes.len()
    }

    pub fn spacing(&self) -> f64 {
        self.ds
    }

    pub fn start(&self) -> f64 {
        self.s0
    }
}

fn eval_gap(
    model: &StateSpaceModel,
    derivs: Option<&ModelDerivatives>,
    dt: f64,
) -> Result<GridNode> {
    let d = model.dim();
    if dt == 0.0 {
        let n = derivs.map_or(0, |dv| dv.n_params());
        return Ok(GridNode {
            a: DMatrix::identity(d, d),
            q: DMatrix::zeros(d, d),
            da: vec![DMatrix::zeros(d, d); n],
            dq: vec![DMatrix::zeros(d, d); n],
        });
    }
    let x = &model.f * dt;
    let a = expm(&x)?;
    let mut q = &model.pinf - &a * &model.pinf * a.transpose();
    symmetrize(&mut q);

    let (mut da, mut dq) = (Vec::new(), Vec::new());
    if let Some(dv) = derivs {
        for j in 0..dv.n_params() {
            let (_, daj) = expm_deriv(&x, &(&dv.df[j] * dt))?;
            let dpi = &dv.dpinf[j];
            let mut dqj = dpi
                - &daj * &model.pinf * a.transpose()
                - &a * dpi * a.transpose()
                - &a * &model.pinf * daj.transpose();
            symmetrize(&mut dqj);
            da.push(daj);
            dq.push(dqj);
        }
    }
    Ok(GridNode { a, q, da, dq })
}

fn validate_gaps(dts: &[f64]) -> Result<()> {
    for (i, dt) in dts.iter().enumerate() {
        if !dt.is_finite() || *dt < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gap {i} is {dt}; inputs must be sorted and finite"
            )));
        }
    }
    Ok(())
}

/// Exact per-gap discretization: `A_i = exp(dt_i F)` and the stationary
/// identity `Q_i = Pinf - A_i Pinf A_i^T`. Gaps equal up to a relative
/// tolerance share one evaluation.
pub fn discretize_exact(
    model: &StateSpaceModel,
    dts: &[f64],
    derivs: Option<&ModelDerivatives>,
) -> Result<DiscreteTransitions> {
    validate_gaps(dts)?;
    let n_params = derivs.map_or(0, |d| d.n_params());

    // Group indices by gap value.
    let mut order: Vec<usize> = (0..dts.len()).collect();
    order.sort_by(|&i, &j| dts[i].total_cmp(&dts[j]));
    let mut a = vec![DMatrix::zeros(0, 0); dts.len()];
    let mut q = vec![DMatrix::zeros(0, 0); dts.len()];
    let mut da = vec![vec![DMatrix::zeros(0, 0); dts.len()]; n_params];
    let mut dq = vec![vec![DMatrix::zeros(0, 0); dts.len()]; n_params];

    let mut idx = 0;
    while idx < order.len() {
        let rep = dts[order[idx]];
        let node = eval_gap(model, derivs, rep)?;
        let mut j = idx;
        while j < order.len() && dts[order[j]] - rep <= DEDUP_RTOL * rep.max(dts[order[j]]) {
            let gi = order[j];
            a[gi] = node.a.clone();
            q[gi] = node.q.clone();
            for p in 0..n_params {
                da[p][gi] = node.da[p].clone();
                dq[p][gi] = node.dq[p].clone();
            }
            j += 1;
        }
        idx = j;
    }

    Ok(DiscreteTransitions {
        dts: dts.to_vec(),
        a,
        q,
        da: (n_params > 0).then_some(da),
        dq: (n_params > 0).then_some(dq),
        mode: TransitionMode::Exact,
    })
}

/// Precompute an equispaced grid over `[min dt, max dt]` with `k` nodes.
/// When all gaps coincide the grid degenerates to the single exact value.
pub fn build_interp_grid(
    model: &StateSpaceModel,
    dts: &[f64],
    k: usize,
    derivs: Option<&ModelDerivatives>,
) -> Result<InterpGrid> {
    if k < 4 {
        return Err(Error::InvalidArgument(format!(
            "interpolation needs at least 4 grid points, got {k}"
        )));
    }
    if dts.is_empty() {
        return Err(Error::InvalidArgument("no gaps to build a grid over".into()));
    }
    validate_gaps(dts)?;
    let lo = dts.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = dts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    if hi - lo <= DEDUP_RTOL * hi.max(1e-300) {
        let node = eval_gap(model, derivs, lo)?;
        return Ok(InterpGrid {
            s0: lo,
            ds: 0.0,
            nodes: vec![node],
            model: model.clone(),
            derivs: derivs.cloned(),
        });
    }

    let ds = (hi - lo) / (k - 1) as f64;
    let nodes = (0..k)
        .map(|j| eval_gap(model, derivs, lo + j as f64 * ds))
        .collect::<Result<Vec<_>>>()?;
    Ok(InterpGrid { s0: lo, ds, nodes, model: model.clone(), derivs: derivs.cloned() })
}

/// Keys cubic convolution weights (a = -1/2) for offset `t` in [0, 1).
fn keys_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Interpolate transitions for each gap from the grid; gaps outside the
/// grid range (and exact zero gaps) fall back to exact evaluation.
pub fn interp_transitions(grid: &InterpGrid, dts: &[f64]) -> Result<DiscreteTransitions> {
    validate_gaps(dts)?;
    let k = grid.nodes.len();
    let n_params = grid.derivs.as_ref().map_or(0, |d| d.n_params());
    let mut a = Vec::with_capacity(dts.len());
    let mut q = Vec::with_capacity(dts.len());
    let mut da = vec![Vec::with_capacity(dts.len()); n_params];
    let mut dq = vec![Vec::with_capacity(dts.len()); n_params];

    for &dt in dts {
        let node = if dt == 0.0 {
            eval_gap(&grid.model, grid.derivs.as_ref(), 0.0)?
        } else if k == 1 {
            if (dt - grid.s0).abs() <= DEDUP_RTOL * dt.max(grid.s0) {
                grid.nodes[0].clone()
            } else {
                eval_gap(&grid.model, grid.derivs.as_ref(), dt)?
            }
        } else {
            let u = (dt - grid.s0) / grid.ds;
            if !(0.0..=(k - 1) as f64 + 1e-9).contains(&u) {
                eval_gap(&grid.model, grid.derivs.as_ref(), dt)?
            } else {
                let j = (u.floor() as usize).min(k - 2) as isize;
                let t = u - j as f64;
                let w = keys_weights(t);
                // Out-of-range stencil nodes use Keys' quadratic extension
                // (f_{-1} = 3 f_0 - 3 f_1 + f_2), which keeps the edge
                // cells at cubic-kernel accuracy.
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(6);
                for (c, rel) in w.iter().zip([-1isize, 0, 1, 2]) {
                    let idx = j + rel;
                    if idx < 0 {
                        taps.push((0, 3.0 * c));
                        taps.push((1, -3.0 * c));
                        taps.push((2, *c));
                    } else if idx as usize > k - 1 {
                        taps.push((k - 1, 3.0 * c));
                        taps.push((k - 2, -3.0 * c));
                        taps.push((k - 3, *c));
                    } else {
                        taps.push((idx as usize, *c));
                    }
                }
                let dim = grid.model.dim();
                let mut ai = DMatrix::zeros(dim, dim);
                let mut qi = DMatrix::zeros(dim, dim);
                let mut dai = vec![DMatrix::zeros(dim, dim); n_params];
                let mut dqi = vec![DMatrix::zeros(dim, dim); n_params];
                for (id, c) in taps {
                    let gn = &grid.nodes[id];
                    ai += &gn.a * c;
                    qi += &gn.q * c;
                    for p in 0..n_params {
                        dai[p] += &gn.da[p] * c;
                        dqi[p] += &gn.dq[p] * c;
                    }
                }
                symmetrize(&mut qi);
                GridNode { a: ai, q: qi, da: dai, dq: dqi }
            }
        };
        a.push(node.a);
        q.push(node.q);
        for p in 0..n_params {
            da[p].push(node.da[p].clone());
            dq[p].push(node.dq[p].clone());
        }
    }

    Ok(DiscreteTransitions {
        dts: dts.to_vec(),
        a,
        q,
        da: (n_params > 0).then_some(da),
        dq: (n_params > 0).then_some(dq),
        mode: TransitionMode::Interpolated(k),
    })
}

/// Build transitions for the gap sequence, choosing between exact and
/// interpolated evaluation per the options.
pub fn transitions(
    model: &StateSpaceModel,
    derivs: Option<&ModelDerivatives>,
    dts: &[f64],
    opts: &InterpOptions,
) -> Result<DiscreteTransitions> {
    if opts.enabled && !dts.is_empty() {
        let grid = build_interp_grid(model, dts, opts.k, derivs)?;
        interp_transitions(&grid, dts)
    } else {
        discretize_exact(model, dts, derivs)
    }
}
