//! Linearization of the discrete dynamics, shape-matrix propagation and
//! constraint tightening for ellipsoidal tubes.

use serde::{Deserialize, Serialize};

use crate::derivatives::{value_and_jacobian, Real, VectorFn};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// `x+ = f(x, u, w)`, evaluated on the stacked vector `[x, u, w]`.
#[derive(Clone, Debug)]
pub struct DiscreteDynamics<F> {
    f: F,
    nx: usize,
    nu: usize,
    nw: usize,
}

impl<F: VectorFn> DiscreteDynamics<F> {
    pub fn new(f: F, nx: usize, nu: usize, nw: usize) -> Result<Self> {
        if f.input_dim() != nx + nu + nw || f.output_dim() != nx {
            return Err(Error::DimensionMismatch(format!(
                "dynamics must map R^{} -> R^{nx}, got R^{} -> R^{}",
                nx + nu + nw,
                f.input_dim(),
                f.output_dim()
            )));
        }
        Ok(DiscreteDynamics { f, nx, nu, nw })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nu(&self) -> usize {
        self.nu
    }
    pub fn nw(&self) -> usize {
        self.nw
    }
    pub fn function(&self) -> &F {
        &self.f
    }

    pub fn step<S: Real>(&self, x: &[S], u: &[S], w: &[S]) -> Result<Vec<S>> {
        let mut z = Vec::with_capacity(self.nx + self.nu + self.nw);
        z.extend_from_slice(x);
        z.extend_from_slice(u);
        z.extend_from_slice(w);
        self.f.eval(&z)
    }
}

/// Jacobians at `(x̄, ū, 0)` together with the nominal successor.
#[derive(Clone, Debug)]
pub struct LinearizedDynamics<S> {
    pub a: Mat<S>,
    pub b: Mat<S>,
    pub gamma: Mat<S>,
    pub next: Vec<S>,
}

pub fn linearize<S: Real, F: VectorFn>(dyn_: &DiscreteDynamics<F>, xbar: &[S], ubar: &[S]) -> Result<LinearizedDynamics<S>> {
    let (nx, nu, nw) = (dyn_.nx, dyn_.nu, dyn_.nw);
    if xbar.len() != nx || ubar.len() != nu {
        return Err(Error::DimensionMismatch("linearization point has wrong shape".into()));
    }
    let mut z = Vec::with_capacity(nx + nu + nw);
    z.extend_from_slice(xbar);
    z.extend_from_slice(ubar);
    z.extend(std::iter::repeat(S::zero()).take(nw));
    let (next, jac) = value_and_jacobian(&dyn_.f, &z)?;
    Ok(LinearizedDynamics {
        a: Mat::from_fn(nx, nx, |i, j| jac[(i, j)]),
        b: Mat::from_fn(nx, nu, |i, j| jac[(i, nx + j)]),
        gamma: Mat::from_fn(nx, nw, |i, j| jac[(i, nx + nu + j)]),
        next,
    })
}

/// Permitted nonzero pattern of a feedback gain (`nu x nx`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GainMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl GainMask {
    pub fn none(nu: usize, nx: usize) -> Self {
        GainMask { rows: nu, cols: nx, allowed: vec![false; nu * nx] }
    }

    pub fn full(nu: usize, nx: usize) -> Self {
        GainMask { rows: nu, cols: nx, allowed: vec![true; nu * nx] }
    }

    /// Every input may react to the listed state columns.
    pub fn columns(nu: usize, nx: usize, cols: &[usize]) -> Result<Self> {
        let mut m = Self::none(nu, nx);
        for &c in cols {
            if c >= nx {
                return Err(Error::InvalidArgument(format!("gain column {c} out of range for nx = {nx}")));
            }
            for r in 0..nu {
                m.allowed[r * nx + c] = true;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    /// Permitted `(row, col)` entries in row-major order.
    pub fn entries(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.allows(r, c))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }
}

/// Ancillary gain `K` in `u = ū + K (x - x̄)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackGain<S> {
    k: Mat<S>,
    mask: GainMask,
}

impl<S: Real> FeedbackGain<S> {
    pub fn zero(nu: usize, nx: usize) -> Self {
        FeedbackGain { k: Mat::zeros(nu, nx), mask: GainMask::none(nu, nx) }
    }

    pub fn new(k: Mat<S>, mask: GainMask) -> Result<Self> {
        if k.rows() != mask.rows || k.cols() != mask.cols {
            return Err(Error::DimensionMismatch("gain and mask shapes differ".into()));
        }
        for r in 0..k.rows() {
            for c in 0..k.cols() {
                if !mask.allows(r, c) && k[(r, c)].value() != 0.0 {
                    return Err(Error::InvalidArgument(format!("gain entry ({r}, {c}) is outside the mask")));
                }
            }
        }
        Ok(FeedbackGain { k, mask })
    }

    /// Fills the masked entries from `values` (row-major over the mask).
    pub fn from_masked(mask: &GainMask, values: &[S]) -> Result<Self> {
        let entries = mask.entries();
        if entries.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries, got {} values",
                entries.len(),
                values.len()
            )));
        }
        let mut k = Mat::zeros(mask.rows, mask.cols);
        for (&(r, c), v) in entries.iter().zip(values) {
            k[(r, c)] = *v;
        }
        Ok(FeedbackGain { k, mask: mask.clone() })
    }

    pub fn matrix(&self) -> &Mat<S> {
        &self.k
    }
    pub fn mask(&self) -> &GainMask {
        &self.mask
    }
}

/// Over-approximation terms for the linearization error. All default to zero.
pub trait NonlinearityBound: Sync {
    fn omega_p<S: Real>(&self, _p: &Mat<S>, _xbar: &[S], _ubar: &[S]) -> Option<Mat<S>> {
        None
    }
    fn omega_stage<S: Real>(&self, _row: usize, _p: &Mat<S>, _xbar: &[S], _ubar: &[S]) -> S {
        S::zero()
    }
    fn omega_terminal<S: Real>(&self, _row: usize, _p: &Mat<S>, _xbar: &[S]) -> S {
        S::zero()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ZeroBound;

impl NonlinearityBound for ZeroBound {}

/// Where the closed-loop matrix `M = A + BK` is transposed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationConvention {
    /// `M P M^T`, consistent with the tightening terms.
    #[default]
    Covariance,
    /// `M^T P M`, the transposed form.
    Transposed,
}

/// Factor applied to `Γ Γ^T` given the disturbance set radius `σ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceScaling {
    /// `σ²`, the shape matrix of a ball of radius `σ`.
    #[default]
    SigmaSquared,
    Sigma,
}

impl DisturbanceScaling {
    pub fn effective(self, sigma: f64) -> f64 {
        match self {
            DisturbanceScaling::SigmaSquared => sigma * sigma,
            DisturbanceScaling::Sigma => sigma,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationConfig {
    #[serde(default)]
    pub convention: PropagationConvention,
    #[serde(default)]
    pub disturbance_scaling: DisturbanceScaling,
}

/// `P+ = M P M^T + σ_eff Γ Γ^T + Ω_P`, symmetrized.
#[allow(clippy::too_many_arguments)]
pub fn propagate_shape<S: Real, B: NonlinearityBound>(
    p: &Mat<S>,
    lin: &LinearizedDynamics<S>,
    k: &Mat<S>,
    sigma: f64,
    cfg: &PropagationConfig,
    bound: &B,
    xbar: &[S],
    ubar: &[S],
) -> Mat<S> {
    let m = lin.a.add(&lin.b.matmul(k));
    let core = match cfg.convention {
        PropagationConvention::Covariance => m.matmul(p).matmul_t(&m),
        PropagationConvention::Transposed => m.transpose().matmul(p).matmul(&m),
    };
    let sigma_eff = cfg.disturbance_scaling.effective(sigma);
    let mut next = core.add(&lin.gamma.matmul_t(&lin.gamma).scale(S::cst(sigma_eff)));
    if let Some(omega) = bound.omega_p(p, xbar, ubar) {
        next = next.add(&omega);
    }
    next.symmetrize()
}

/// Stage constraint rows `h_i(x, u)` on the stacked vector `[x, u]`.
///
/// Returns `h_i(x̄, ū) + sqrt(H_i + eps)` for every row, where
/// `H_i = Ω_i + g_i^T [I; K] P [I; K]^T g_i` and `g_i = ∇h_i(x̄, ū)`.
#[allow(clippy::too_many_arguments)]
pub fn tighten_stage<S: Real, H: VectorFn, B: NonlinearityBound>(
    h: &H,
    xbar: &[S],
    ubar: &[S],
    p: &Mat<S>,
    k: &Mat<S>,
    bound: &B,
    eps: f64,
) -> Result<Vec<S>> {
    let nx = xbar.len();
    let mut point = xbar.to_vec();
    point.extend_from_slice(ubar);
    let (vals, jac) = value_and_jacobian(h, &point)?;
    let mut out = Vec::with_capacity(vals.len());
    for (row, v) in vals.iter().enumerate() {
        let g = jac.row(row);
        let (gx, gu) = g.split_at(nx);
        // [I; K]^T g = g_x + K^T g_u
        let mut d = gx.to_vec();
        for (di, ki) in d.iter_mut().zip(k.tr_vec(gu)) {
            *di += ki;
        }
        let spread = p.quad_form(&d) + bound.omega_stage(row, p, xbar, ubar);
        out.push(*v + (spread + eps).sqrt());
    }
    Ok(out)
}

/// Terminal rows: `h_j(x̄) + sqrt(Ω_j + g_j^T P g_j + eps)`.
pub fn tighten_terminal<S: Real, H: VectorFn, B: NonlinearityBound>(
    h: &H,
    xbar: &[S],
    p: &Mat<S>,
    bound: &B,
    eps: f64,
) -> Result<Vec<S>> {
    let (vals, jac) = value_and_jacobian(h, xbar)?;
    Ok(vals
        .iter()
        .enumerate()
        .map(|(row, v)| *v + (p.quad_form(jac.row(row)) + bound.omega_terminal(row, p, xbar) + eps).sqrt())
        .collect())
}

/// Convenience for `f64` callers that hold exact matrices.
pub fn propagate_shape_f64<B: NonlinearityBound>(
    p: &Mat<f64>,
    lin: &LinearizedDynamics<f64>,
    k: &FeedbackGain<f64>,
    sigma: f64,
    cfg: &PropagationConfig,
    bound: &B,
    xbar: &[f64],
    ubar: &[f64],
) -> Mat<f64> {
    propagate_shape(p, lin, k.matrix(), sigma, cfg, bound, xbar, ubar)
}
