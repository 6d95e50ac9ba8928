//! Augmented-Lagrangian solver for smooth inequality-constrained problems
//!
//! ```text
//! min f(z)  s.t.  g(z) <= 0,  lb <= z <= ub
//! ```
//!
//! Finite bounds are appended to `g` as extra rows (all lower-bound rows
//! first, then all upper-bound rows). Multipliers returned by the solver
//! follow the same ordering.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::derivatives::{Dual, Real};
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

/// Tangent width used when differentiating an [`NlpProblem`].
pub const NLP_CHUNK: usize = 16;

/// A problem written once over any [`Real`] scalar.
pub trait NlpProblem: Sync {
    fn dim(&self) -> usize;
    fn num_residuals(&self) -> usize;
    fn lower_bounds(&self) -> Vec<f64> {
        vec![f64::NEG_INFINITY; self.dim()]
    }
    fn upper_bounds(&self) -> Vec<f64> {
        vec![f64::INFINITY; self.dim()]
    }
    /// Objective and inequality residuals (feasible iff all `<= 0`).
    fn evaluate<S: Real>(&self, z: &[S]) -> Result<(S, Vec<S>)>;
    /// Problem-specific first derivatives; `None` falls back to dense
    /// forward passes over `evaluate`.
    fn derivatives(&self, _z: &[f64]) -> Option<Result<Derivatives>> {
        None
    }
}

/// First-order information at a point.
#[derive(Clone, Debug)]
pub struct Derivatives {
    pub objective: f64,
    pub residuals: Vec<f64>,
    pub gradient: Vec<f64>,
    /// `num_residuals x dim`.
    pub jacobian: Mat<f64>,
}

/// Object-safe callback interface the solver consumes. Other solvers can be
/// driven through the same trait.
pub trait NlpCallbacks: Sync {
    fn dim(&self) -> usize;
    fn num_residuals(&self) -> usize;
    fn lower_bounds(&self) -> Vec<f64>;
    fn upper_bounds(&self) -> Vec<f64>;
    fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn eval_derivatives(&self, z: &[f64]) -> Result<Derivatives>;
}

/// Adapts an [`NlpProblem`] to [`NlpCallbacks`] with forward-mode derivatives.
#[derive(Clone, Copy, Debug)]
pub struct Forward<P>(pub P);

impl<P: NlpProblem> NlpCallbacks for Forward<P> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn num_residuals(&self) -> usize {
        self.0.num_residuals()
    }
    fn lower_bounds(&self) -> Vec<f64> {
        self.0.lower_bounds()
    }
    fn upper_bounds(&self) -> Vec<f64> {
        self.0.upper_bounds()
    }

    fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (f, g) = self.0.evaluate(z)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        Ok((f, g))
    }

    fn eval_derivatives(&self, z: &[f64]) -> Result<Derivatives> {
        if let Some(d) = self.0.derivatives(z) {
            let d = d?;
            if !d.objective.is_finite()
                || d.residuals.iter().chain(&d.gradient).any(|v| !v.is_finite())
                || !d.jacobian.all_finite()
            {
                return Err(Error::NonFiniteObjective);
            }
            return Ok(d);
        }
        type D = Dual<f64, NLP_CHUNK>;
        let n = z.len();
        let m = self.0.num_residuals();
        let mut gradient = vec![0.0; n];
        let mut jacobian = Mat::zeros(m, n);
        let mut value = None;
        let mut start = 0;
        // A zero-width problem still needs one pass for the values.
        while start < n || value.is_none() {
            let end = (start + NLP_CHUNK).min(n);
            let zd: Vec<D> = z
                .iter()
                .enumerate()
                .map(|(j, &v)| if j >= start && j < end { D::variable(v, j - start) } else { D::constant(v) })
                .collect();
            let (f, g) = self.0.evaluate(&zd)?;
            if g.len() != m {
                return Err(Error::DimensionMismatch(format!("expected {m} residuals, got {}", g.len())));
            }
            if !f.all_finite() || g.iter().any(|v| !v.all_finite()) {
                return Err(Error::NonFiniteObjective);
            }
            for j in start..end {
                gradient[j] = f.eps[j - start];
                for (i, gi) in g.iter().enumerate() {
                    jacobian[(i, j)] = gi.eps[j - start];
                }
            }
            if value.is_none() {
                value = Some((f.re, g.iter().map(|v| v.re).collect::<Vec<_>>()));
            }
            if end == n {
                break;
            }
            start = end;
        }
        let (objective, residuals) = value.expect("at least one pass");
        Ok(Derivatives { objective, residuals, gradient, jacobian })
    }
}

/// Curvature model of the inner minimization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    /// Limited-memory BFGS on the whole augmented Lagrangian.
    Lbfgs,
    /// Dense damped BFGS for the Lagrangian plus the exact penalty term
    /// `ρ J_A^T J_A` over the active rows. Costs `O(n^3)` per step.
    #[default]
    Structured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub kkt_tol: f64,
    pub feas_tol: f64,
    pub max_outer: usize,
    /// Inner iterations allowed per outer iteration.
    pub max_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub lbfgs_memory: usize,
    pub inner_method: InnerMethod,
    /// Largest entry of a trial step before the line search.
    pub max_step: f64,
    /// Wall-clock limit in seconds. `None` keeps the solve deterministic.
    pub time_budget: Option<f64>,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            kkt_tol: 1e-6,
            feas_tol: 1e-6,
            max_outer: 30,
            max_inner: 1000,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e8,
            lbfgs_memory: 10,
            inner_method: InnerMethod::default(),
            max_step: f64::INFINITY,
            time_budget: None,
            verbose: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.kkt_tol > 0.0 && self.feas_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.penalty_growth > 1.0) {
            return bad("penalty_growth must exceed 1");
        }
        if !(self.penalty_init > 0.0 && self.penalty_max >= self.penalty_init) {
            return bad("penalty_init must be positive and at most penalty_max");
        }
        if !(self.max_step > 0.0) {
            return bad("max_step must be positive");
        }
        if self.lbfgs_memory == 0 || self.max_outer == 0 || self.max_inner == 0 {
            return bad("iteration limits and memory must be positive");
        }
        if matches!(self.time_budget, Some(t) if !(t > 0.0)) {
            return bad("time_budget must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    TimeBudget,
    LineSearchFail,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub outer: usize,
    pub inner: usize,
    pub evaluations: usize,
    pub gradient_evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub z_star: Vec<f64>,
    /// Problem rows followed by finite-bound rows.
    pub multipliers: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub kkt_stationarity: f64,
    pub max_violation: f64,
    pub complementarity: f64,
    pub penalty: f64,
    pub iterations: IterationCounts,
    pub wall_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResidual {
    pub stationarity: f64,
    pub violation: f64,
    pub complementarity: f64,
}

/// Residual rows plus bound rows, with their Jacobian.
struct Augmented<'a> {
    p: &'a dyn NlpCallbacks,
    lower: Vec<(usize, f64)>,
    upper: Vec<(usize, f64)>,
}

impl<'a> Augmented<'a> {
    fn new(p: &'a dyn NlpCallbacks) -> Self {
        let lower = p.lower_bounds().into_iter().enumerate().filter(|(_, b)| b.is_finite()).collect();
        let upper = p.upper_bounds().into_iter().enumerate().filter(|(_, b)| b.is_finite()).collect();
        Augmented { p, lower, upper }
    }

    fn rows(&self) -> usize {
        self.p.num_residuals() + self.lower.len() + self.upper.len()
    }

    fn extend(&self, z: &[f64], g: &mut Vec<f64>) {
        g.extend(self.lower.iter().map(|&(j, b)| b - z[j]));
        g.extend(self.upper.iter().map(|&(j, b)| z[j] - b));
    }

    fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (f, mut g) = self.p.eval(z)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        self.extend(z, &mut g);
        Ok((f, g))
    }

    /// Objective gradient and `J^T y` for a weight vector `y` over all rows.
    fn eval_derivatives(&self, z: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>, Mat<f64>)> {
        let d = self.p.eval_derivatives(z)?;
        let mut g = d.residuals;
        self.extend(z, &mut g);
        Ok((d.objective, g, d.gradient, d.jacobian))
    }

    /// `grad f + J^T y`, where the trailing entries of `y` weight the bound rows.
    fn combine(&self, grad: &[f64], jac: &Mat<f64>, y: &[f64]) -> Vec<f64> {
        let m = self.p.num_residuals();
        let mut out = grad.to_vec();
        let jt = jac.tr_vec(&y[..m]);
        for (o, v) in out.iter_mut().zip(jt) {
            *o += v;
        }
        for (&(j, _), yi) in self.lower.iter().zip(&y[m..]) {
            out[j] -= yi;
        }
        for (&(j, _), yi) in self.upper.iter().zip(&y[m + self.lower.len()..]) {
            out[j] += yi;
        }
        out
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn violation_of(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, &x| m.max(x))
}

/// Stationarity, violation and complementarity at `(z, multipliers)`.
///
/// `multipliers` covers the problem rows, optionally followed by the bound rows.
pub fn kkt_residual(p: &dyn NlpCallbacks, z: &[f64], multipliers: &[f64]) -> Result<KktResidual> {
    let aug = Augmented::new(p);
    if z.len() != p.dim() {
        return Err(Error::DimensionMismatch(format!("point has length {}, problem has {}", z.len(), p.dim())));
    }
    let mut y = multipliers.to_vec();
    if y.len() == p.num_residuals() {
        y.resize(aug.rows(), 0.0);
    }
    if y.len() != aug.rows() {
        return Err(Error::DimensionMismatch(format!("expected {} multipliers, got {}", aug.rows(), y.len())));
    }
    let (_, g, grad, jac) = aug.eval_derivatives(z)?;
    Ok(kkt_from(&aug, &g, &grad, &jac, &y))
}

fn kkt_from(aug: &Augmented, g: &[f64], grad: &[f64], jac: &Mat<f64>, y: &[f64]) -> KktResidual {
    KktResidual {
        stationarity: inf_norm(&aug.combine(grad, jac, y)),
        violation: violation_of(g),
        complementarity: g.iter().zip(y).fold(0.0, |m, (gi, yi)| m.max((gi * yi).abs())),
    }
}

/// Starting point and multipliers for a warm start.
pub fn warm_start_from(prev: &SolveResult, shift: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (shift.to_vec(), prev.multipliers.iter().map(|&l| l.max(0.0)).collect())
}

struct Lbfgs {
    mem: usize,
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    rho: Vec<f64>,
}

impl Lbfgs {
    fn new(mem: usize) -> Self {
        Lbfgs { mem, s: Vec::new(), y: Vec::new(), rho: Vec::new() }
    }

    fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt()) {
            return;
        }
        if self.s.len() == self.mem {
            self.s.remove(0);
            self.y.remove(0);
            self.rho.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
        self.rho.push(1.0 / sy);
    }

    /// `-H g` by the two-loop recursion.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut a = vec![0.0; k];
        for i in (0..k).rev() {
            a[i] = self.rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= a[i] * yj;
            }
        }
        let gamma = match k {
            0 => 1.0 / inf_norm(g).max(1.0),
            _ => dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]),
        };
        for qj in q.iter_mut() {
            *qj *= gamma;
        }
        for i in 0..k {
            let b = self.rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (a[i] - b) * sj;
            }
        }
        q.iter().map(|v| -v).collect()
    }
}

/// Dense Lagrangian Hessian estimate with damped BFGS updates.
struct DenseBfgs {
    h: Mat<f64>,
    fresh: bool,
}

impl DenseBfgs {
    fn new(n: usize) -> Self {
        DenseBfgs { h: Mat::identity(n), fresh: true }
    }

    fn reset(&mut self) {
        self.h = Mat::identity(self.h.rows());
        self.fresh = true;
    }

    fn push(&mut self, s: &[f64], y: &[f64]) {
        let sy = dot(s, y);
        let yy = dot(y, y);
        if self.fresh && sy > 0.0 && yy > 0.0 {
            self.h = Mat::identity(s.len()).scale(yy / sy);
        }
        let hs = self.h.mat_vec(s);
        let shs = dot(s, &hs);
        if !(shs > 1e-10 * dot(s, s).sqrt() * dot(&hs, &hs).sqrt()) || !shs.is_finite() {
            return;
        }
        // Powell damping keeps the update positive definite.
        let theta = if sy >= 0.2 * shs { 1.0 } else { 0.8 * shs / (shs - sy) };
        let r: Vec<f64> = y.iter().zip(&hs).map(|(yi, hi)| theta * yi + (1.0 - theta) * hi).collect();
        let sr = dot(s, &r);
        if !(sr > 1e-10 * dot(s, s).sqrt() * dot(&r, &r).sqrt()) || !sr.is_finite() {
            return;
        }
        let n = s.len();
        for i in 0..n {
            for j in 0..n {
                self.h[(i, j)] += r[i] * r[j] / sr - hs[i] * hs[j] / shs;
            }
        }
        self.fresh = false;
    }
}

enum Curvature {
    Lbfgs(Lbfgs),
    Dense(DenseBfgs),
}

impl Curvature {
    fn reset(&mut self) {
        match self {
            Curvature::Lbfgs(m) => m.reset(),
            Curvature::Dense(h) => h.reset(),
        }
    }

    fn is_fresh(&self) -> bool {
        match self {
            Curvature::Lbfgs(m) => m.s.is_empty(),
            Curvature::Dense(h) => h.fresh,
        }
    }

    /// The penalty term changes with `ρ`; only the limited-memory model mixes it in.
    fn on_penalty_change(&mut self) {
        if let Curvature::Lbfgs(m) = self {
            m.reset();
        }
    }
}

/// Solves `(H + ρ J_A^T J_A) d = -grad`, growing the active set `A` by
/// the rows the linearized step would switch on.
fn structured_direction(h: &Mat<f64>, aug: &Augmented, pt: &Point, lam: &[f64], rho: f64, grad: &[f64]) -> Vec<f64> {
    let m = aug.p.num_residuals();
    let bound_cols: Vec<usize> = aug.lower.iter().chain(&aug.upper).map(|&(j, _)| j).collect();
    let bound_sign: Vec<f64> = aug.lower.iter().map(|_| -1.0).chain(aug.upper.iter().map(|_| 1.0)).collect();
    let mut active: Vec<bool> = (0..pt.g.len()).map(|i| lam[i] + rho * pt.g[i] > 0.0).collect();
    let mut d = solve_model(h, &pt.jac, &bound_cols, &active, rho, grad);
    for _ in 0..3 {
        let mut grew = false;
        for i in 0..active.len() {
            if active[i] {
                continue;
            }
            let jd = if i < m { dot(pt.jac.row(i), &d) } else { bound_sign[i - m] * d[bound_cols[i - m]] };
            if lam[i] + rho * (pt.g[i] + jd) > 0.0 {
                active[i] = true;
                grew = true;
            }
        }
        if !grew {
            break;
        }
        d = solve_model(h, &pt.jac, &bound_cols, &active, rho, grad);
    }
    d
}

fn solve_model(h: &Mat<f64>, jac: &Mat<f64>, bound_cols: &[usize], active: &[bool], rho: f64, grad: &[f64]) -> Vec<f64> {
    let n = grad.len();
    let m = jac.rows();
    let mut k = h.clone();
    for i in (0..m).filter(|&i| active[i]) {
        let nz: Vec<(usize, f64)> = jac.row(i).iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
        for &(a, va) in &nz {
            for &(b, vb) in &nz {
                k[(a, b)] += rho * va * vb;
            }
        }
    }
    for (r, &j) in bound_cols.iter().enumerate() {
        if active[m + r] {
            k[(j, j)] += rho;
        }
    }
    let rhs = nalgebra::DVector::from_iterator(n, grad.iter().map(|v| -v));
    let scale = (0..n).fold(0.0f64, |a, i| a.max(k[(i, i)].abs())).max(1e-12);
    let mut shift = 0.0;
    for _ in 0..12 {
        let mut km = k.to_nalgebra();
        for i in 0..n {
            km[(i, i)] += shift;
        }
        if let Some(ch) = nalgebra::Cholesky::new(km) {
            let d = ch.solve(&rhs);
            if d.iter().all(|v| v.is_finite()) {
                return d.iter().copied().collect();
            }
        }
        shift = if shift == 0.0 { 1e-10 * scale } else { shift * 100.0 };
    }
    grad.iter().map(|v| -v / scale).collect()
}

/// Rockafellar augmented Lagrangian for fixed `(λ, ρ)`:
/// `L = f + (1/2ρ) Σ (max(0, λ + ρ g)² - λ²)`.
fn merit(f: f64, g: &[f64], lam: &[f64], rho: f64) -> f64 {
    f + g
        .iter()
        .zip(lam)
        .map(|(gi, li)| {
            let t = (li + rho * gi).max(0.0);
            (t * t - li * li) / (2.0 * rho)
        })
        .sum::<f64>()
}

fn shifted_multipliers(g: &[f64], lam: &[f64], rho: f64) -> Vec<f64> {
    g.iter().zip(lam).map(|(gi, li)| (li + rho * gi).max(0.0)).collect()
}

struct Point {
    z: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    grad_f: Vec<f64>,
    jac: Mat<f64>,
}

struct Solver<'a> {
    aug: Augmented<'a>,
    cfg: &'a SolverConfig,
    counts: IterationCounts,
    started: Instant,
}

enum InnerEnd {
    Done,
    LineSearchFail,
    IterLimit,
    Time,
}

impl<'a> Solver<'a> {
    fn point(&mut self, z: Vec<f64>) -> Result<Point> {
        self.counts.gradient_evaluations += 1;
        let (f, g, grad_f, jac) = self.aug.eval_derivatives(&z)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        Ok(Point { z, f, g, grad_f, jac })
    }

    fn trial(&mut self, z: &[f64], lam: &[f64], rho: f64) -> f64 {
        self.counts.evaluations += 1;
        match self.aug.eval(z) {
            Ok((f, g)) => merit(f, &g, lam, rho),
            Err(_) => f64::INFINITY,
        }
    }

    fn out_of_time(&self) -> bool {
        matches!(self.cfg.time_budget, Some(t) if self.started.elapsed().as_secs_f64() > t)
    }

    /// Minimizes the augmented Lagrangian from `pt` until `‖∇L‖∞ <= tol`.
    fn inner(&mut self, pt: &mut Point, curv: &mut Curvature, lam: &[f64], rho: f64, tol: f64) -> Result<InnerEnd> {
        let mut reset_used = false;
        let mut phi = merit(pt.f, &pt.g, lam, rho);
        let mut grad = self.aug.combine(&pt.grad_f, &pt.jac, &shifted_multipliers(&pt.g, lam, rho));
        for _ in 0..self.cfg.max_inner {
            if inf_norm(&grad) <= tol {
                return Ok(InnerEnd::Done);
            }
            if self.out_of_time() {
                return Ok(InnerEnd::Time);
            }
            let direction = |curv: &Curvature| match curv {
                Curvature::Lbfgs(m) => m.direction(&grad),
                Curvature::Dense(h) => structured_direction(&h.h, &self.aug, pt, lam, rho, &grad),
            };
            let mut d = direction(curv);
            let mut slope = dot(&grad, &d);
            if !(slope < 0.0) {
                curv.reset();
                d = direction(curv);
                slope = dot(&grad, &d);
            }
            let big = inf_norm(&d);
            if big > self.cfg.max_step {
                let c = self.cfg.max_step / big;
                d.iter_mut().for_each(|v| *v *= c);
                slope *= c;
            }
            let Some((t, phi_t)) = self.line_search(&pt.z, &d, phi, slope, lam, rho) else {
                if reset_used || curv.is_fresh() {
                    return Ok(InnerEnd::LineSearchFail);
                }
                reset_used = true;
                curv.reset();
                continue;
            };
            let z_new: Vec<f64> = pt.z.iter().zip(&d).map(|(z, di)| z + t * di).collect();
            if z_new == pt.z {
                if reset_used || curv.is_fresh() {
                    return Ok(InnerEnd::LineSearchFail);
                }
                reset_used = true;
                curv.reset();
                continue;
            }
            self.counts.inner += 1;
            let next = self.point(z_new)?;
            let y_new = shifted_multipliers(&next.g, lam, rho);
            let grad_new = self.aug.combine(&next.grad_f, &next.jac, &y_new);
            let s: Vec<f64> = d.iter().map(|di| t * di).collect();
            match curv {
                Curvature::Lbfgs(m) => {
                    let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
                    m.push(s, y);
                }
                Curvature::Dense(h) => {
                    // Lagrangian gradient difference at fixed multipliers.
                    let old = self.aug.combine(&pt.grad_f, &pt.jac, &y_new);
                    let y: Vec<f64> = grad_new.iter().zip(&old).map(|(a, b)| a - b).collect();
                    h.push(&s, &y);
                }
            }
            if self.cfg.verbose {
                eprintln!(
                    "  inner {:5} L={:+.6e} |grad|={:.3e} step={:.3e}",
                    self.counts.inner,
                    phi_t,
                    inf_norm(&grad_new),
                    t
                );
            }
            *pt = next;
            phi = merit(pt.f, &pt.g, lam, rho);
            grad = grad_new;
        }
        Ok(if inf_norm(&grad) <= tol { InnerEnd::Done } else { InnerEnd::IterLimit })
    }

    /// Armijo backtracking from `t = 1`, with one extra trial at the
    /// minimizer of the quadratic through `φ(0)`, `φ'(0)` and `φ(1)`.
    fn line_search(&mut self, z: &[f64], d: &[f64], phi0: f64, slope: f64, lam: &[f64], rho: f64) -> Option<(f64, f64)> {
        const C1: f64 = 1e-4;
        const SHRINK: f64 = 0.5;
        const TRIALS: usize = 40;
        let at = |t: f64| -> Vec<f64> { z.iter().zip(d).map(|(zi, di)| zi + t * di).collect() };
        // Slack for decreases lost in round-off near a minimizer.
        let noise = 10.0 * f64::EPSILON * (1.0 + phi0.abs());
        let armijo = |t: f64, v: f64| v <= phi0 + C1 * t * slope + noise;

        let mut t = 1.0;
        let mut phi_t = self.trial(&at(t), lam, rho);
        let curvature = phi_t - phi0 - slope;
        if phi_t.is_finite() && curvature > 0.0 {
            let tq = -slope / (2.0 * curvature);
            if tq.is_finite() && tq > 0.0 && (tq - 1.0).abs() > 1e-9 {
                let tq = tq.clamp(1e-3, 10.0);
                let phi_q = self.trial(&at(tq), lam, rho);
                let q_ok = armijo(tq, phi_q);
                if q_ok && (!armijo(1.0, phi_t) || phi_q < phi_t) {
                    return Some((tq, phi_q));
                }
                if !armijo(1.0, phi_t) && tq < 1.0 {
                    t = tq;
                    phi_t = phi_q;
                }
            }
        }
        for _ in 0..TRIALS {
            if armijo(t, phi_t) {
                return Some((t, phi_t));
            }
            t *= SHRINK;
            phi_t = self.trial(&at(t), lam, rho);
        }
        None
    }
}

/// Solves from a cold start (all multipliers zero, penalty `ρ₀`).
pub fn solve(p: &dyn NlpCallbacks, z0: &[f64], cfg: &SolverConfig) -> Result<SolveResult> {
    solve_warm(p, z0, None, cfg)
}

/// Solves from `z0` with optional initial multipliers over all rows.
pub fn solve_warm(p: &dyn NlpCallbacks, z0: &[f64], multipliers: Option<&[f64]>, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    if z0.len() != p.dim() {
        return Err(Error::DimensionMismatch(format!("start point has length {}, problem has {}", z0.len(), p.dim())));
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("start point is not finite".into()));
    }
    let aug = Augmented::new(p);
    let rows = aug.rows();
    let mut lam = match multipliers {
        Some(m) if m.len() == rows => m.iter().map(|v| v.max(0.0)).collect(),
        Some(m) if m.len() == p.num_residuals() => {
            let mut v: Vec<f64> = m.iter().map(|v| v.max(0.0)).collect();
            v.resize(rows, 0.0);
            v
        }
        Some(m) => {
            return Err(Error::DimensionMismatch(format!("expected {rows} multipliers, got {}", m.len())));
        }
        None => vec![0.0; rows],
    };
    let mut s = Solver { aug, cfg, counts: IterationCounts::default(), started: Instant::now() };
    let mut pt = s.point(z0.to_vec())?;
    let mut rho = cfg.penalty_init;
    let mut prev_violation = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    let mut kkt = kkt_from(&s.aug, &pt.g, &pt.grad_f, &pt.jac, &lam);
    let mut curv = match cfg.inner_method {
        InnerMethod::Lbfgs => Curvature::Lbfgs(Lbfgs::new(cfg.lbfgs_memory)),
        InnerMethod::Structured => Curvature::Dense(DenseBfgs::new(p.dim())),
    };

    if kkt.violation <= cfg.feas_tol && kkt.stationarity <= cfg.kkt_tol {
        status = SolveStatus::Converged;
    } else {
        for outer in 0..cfg.max_outer {
            s.counts.outer += 1;
            let tol = if rows == 0 { cfg.kkt_tol } else { cfg.kkt_tol.max(0.1f64.powi(outer as i32 + 1)) };
            let end = s.inner(&mut pt, &mut curv, &lam, rho, tol)?;
            lam = shifted_multipliers(&pt.g, &lam, rho);
            kkt = kkt_from(&s.aug, &pt.g, &pt.grad_f, &pt.jac, &lam);
            if cfg.verbose {
                eprintln!(
                    "outer {:3} f={:+.6e} viol={:.3e} stat={:.3e} rho={:.1e}",
                    outer, pt.f, kkt.violation, kkt.stationarity, rho
                );
            }
            if kkt.violation <= cfg.feas_tol && kkt.stationarity <= cfg.kkt_tol {
                status = SolveStatus::Converged;
                break;
            }
            match end {
                InnerEnd::Time => {
                    status = SolveStatus::TimeBudget;
                    break;
                }
                InnerEnd::LineSearchFail if tol <= cfg.kkt_tol && kkt.violation <= cfg.feas_tol => {
                    status = SolveStatus::LineSearchFail;
                    break;
                }
                _ => {}
            }
            if kkt.violation > cfg.feas_tol && kkt.violation > 0.25 * prev_violation {
                let grown = (rho * cfg.penalty_growth).min(cfg.penalty_max);
                if grown != rho {
                    rho = grown;
                    curv.on_penalty_change();
                }
            }
            prev_violation = kkt.violation;
        }
    }
    Ok(SolveResult {
        z_star: pt.z,
        multipliers: lam,
        status,
        objective: pt.f,
        kkt_stationarity: kkt.stationarity,
        max_violation: kkt.violation,
        complementarity: kkt.complementarity,
        penalty: rho,
        iterations: s.counts,
        wall_time: s.started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        h: Mat<f64>,
        c: Vec<f64>,
    }

    impl NlpProblem for Quad {
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn num_residuals(&self) -> usize {
            0
        }
        fn evaluate<S: Real>(&self, z: &[S]) -> Result<(S, Vec<S>)> {
            let hz = Mat::<S>::lift(&self.h).mat_vec(z);
            let mut f = dot(z, &hz) * 0.5;
            for (zi, ci) in z.iter().zip(&self.c) {
                f -= *zi * *ci;
            }
            Ok((f, vec![]))
        }
    }

    #[test]
    fn quadratic_converges_in_n_plus_five() {
        let n = 6;
        let h = Mat::from_fn(n, n, |i, j| if i == j { 2.0 + i as f64 } else { 0.3 / (1.0 + (i + j) as f64) });
        let c: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let want = Mat::from_nalgebra(&h.to_nalgebra().try_inverse().unwrap()).mat_vec(&c);
        let p = Forward(Quad { h, c });
        let cfg = SolverConfig { kkt_tol: 1e-11, ..Default::default() };
        let r = solve(&p, &vec![0.0; n], &cfg).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        assert!(r.iterations.inner <= n + 5, "took {} inner iterations", r.iterations.inner);
        for (a, b) in r.z_star.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    struct Shifted;
    impl NlpProblem for Shifted {
        fn dim(&self) -> usize {
            1
        }
        fn num_residuals(&self) -> usize {
            1
        }
        fn evaluate<S: Real>(&self, z: &[S]) -> Result<(S, Vec<S>)> {
            Ok(((z[0] - 1.0).sqr(), vec![z[0]]))
        }
    }

    #[test]
    fn kkt_residual_examples() {
        let p = Forward(Shifted);
        let k = kkt_residual(&p, &[0.0], &[2.0]).unwrap();
        assert!(k.stationarity < 1e-10 && k.violation < 1e-10 && k.complementarity < 1e-10);
        let k = kkt_residual(&p, &[-0.5], &[0.0]).unwrap();
        assert_eq!((k.violation, k.complementarity), (0.0, 0.0));
        let k = kkt_residual(&p, &[0.25], &[0.0]).unwrap();
        assert_eq!(k.violation, 0.25);
    }

    #[test]
    fn warm_start_clamps() {
        let r = solve(&Forward(Shifted), &[0.3], &SolverConfig::default()).unwrap();
        let (z, m) = warm_start_from(&r, &r.z_star);
        assert_eq!(z, r.z_star);
        assert_eq!(m, r.multipliers);
        let fake = SolveResult { multipliers: vec![-1.0, 2.0], ..r };
        assert_eq!(warm_start_from(&fake, &[0.0]).1, vec![0.0, 2.0]);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = SolverConfig { penalty_growth: 1.0, ..Default::default() };
        assert!(matches!(solve(&Forward(Shifted), &[0.0], &cfg), Err(Error::Config(_))));
    }
}
