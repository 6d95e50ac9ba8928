//! Ellipsoids `E(Q, c) = {x : (x-c)' Q^+ (x-c) <= 1}`, halfspaces
//! `H(a, b) = {x : a'x <= b}`, and the minimum-volume enclosure of their
//! intersection.
//!
//! The relative cut depth `alpha = (a'c - b) / sqrt(a'Qa)` parametrizes the
//! cut. For `-1/n <= alpha <= 1` the enclosure is
//!
//! ```text
//! d = c - tau * Qa / sqrt(a'Qa)
//! R = delta * (Q - sigma_cut * Qa a'Q / (a'Qa))
//! tau = (1 + n alpha) / (n + 1)
//! sigma_cut = 2 (1 + n alpha) / ((n + 1)(1 + alpha))
//! delta = n^2 / (n^2 - 1) * (1 - alpha^2)
//! ```
//!
//! and shallower cuts return the input unchanged. Inside gradient-based
//! solvers the clamp at `-1/n` is replaced by a shifted softplus that never
//! exceeds the clamp, so the enclosure only grows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::derivatives::Real;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Mat};

pub const PSD_TOL: f64 = 1e-10;
pub const MEMBERSHIP_TOL: f64 = 1e-9;
const DEGENERATE_TOL: f64 = 1e-14;

/// Symmetric positive semidefinite matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymPsdMatrix(Mat<f64>);

impl SymPsdMatrix {
    pub fn new(m: Mat<f64>) -> Result<Self> {
        if !m.is_square() || m.rows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "shape matrix must be square and non-empty, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let scale = m.max_abs().max(1.0);
        for i in 0..m.rows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        let m = m.symmetrize();
        let min_eig = m.min_eigenvalue();
        if min_eig < -PSD_TOL {
            return Err(Error::NotPsd(min_eig));
        }
        Ok(SymPsdMatrix(m))
    }

    pub fn identity(n: usize) -> Self {
        SymPsdMatrix(Mat::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        SymPsdMatrix(Mat::zeros(n, n))
    }

    pub fn diag(d: &[f64]) -> Result<Self> {
        Self::new(Mat::diag(d))
    }

    /// Row-major upper triangle, `n (n + 1) / 2` entries.
    pub fn from_upper_triangle(n: usize, upper: &[f64]) -> Result<Self> {
        if upper.len() != n * (n + 1) / 2 {
            return Err(Error::DimensionMismatch(format!(
                "upper triangle of a {n}x{n} matrix has {} entries, got {}",
                n * (n + 1) / 2,
                upper.len()
            )));
        }
        let mut m = Mat::zeros(n, n);
        let mut it = upper.iter();
        for i in 0..n {
            for j in i..n {
                let v = *it.next().expect("length checked");
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self::new(m)
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat<f64> {
        &self.0
    }

    pub fn into_mat(self) -> Mat<f64> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EllipsoidRecord", into = "EllipsoidRecord")]
pub struct Ellipsoid {
    shape: SymPsdMatrix,
    center: Vec<f64>,
}

/// Serialized form of an [`Ellipsoid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidRecord {
    pub n: usize,
    pub center: Vec<f64>,
    pub shape_upper_triangle: Vec<f64>,
}

impl TryFrom<EllipsoidRecord> for Ellipsoid {
    type Error = Error;
    fn try_from(r: EllipsoidRecord) -> Result<Self> {
        Ellipsoid::new(SymPsdMatrix::from_upper_triangle(r.n, &r.shape_upper_triangle)?, r.center)
    }
}

impl From<Ellipsoid> for EllipsoidRecord {
    fn from(e: Ellipsoid) -> Self {
        EllipsoidRecord { n: e.dim(), shape_upper_triangle: e.shape.upper_triangle(), center: e.center }
    }
}

impl Ellipsoid {
    pub fn new(shape: SymPsdMatrix, center: Vec<f64>) -> Result<Self> {
        if shape.dim() != center.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape is {0}x{0} but center has {1} entries",
                shape.dim(),
                center.len()
            )));
        }
        Ok(Ellipsoid { shape, center })
    }

    pub fn unit_ball(n: usize) -> Self {
        Ellipsoid { shape: SymPsdMatrix::identity(n), center: vec![0.0; n] }
    }

    pub fn point(center: Vec<f64>) -> Self {
        Ellipsoid { shape: SymPsdMatrix::zeros(center.len()), center }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn shape(&self) -> &SymPsdMatrix {
        &self.shape
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    normal: Vec<f64>,
    offset: f64,
}

impl Halfspace {
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self> {
        if norm(&normal) <= 1e-12 {
            return Err(Error::InvalidArgument("halfspace normal must be nonzero".into()));
        }
        Ok(Halfspace { normal, offset })
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// The complementary side `H(-a, -b)` sharing the boundary plane.
    pub fn flipped(&self) -> Self {
        Halfspace { normal: self.normal.iter().map(|v| -v).collect(), offset: -self.offset }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        dot(&self.normal, x) <= self.offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutCoefficients<S = f64> {
    pub alpha: S,
    pub tau: S,
    pub sigma_cut: S,
    pub delta: S,
}

/// Shifted softplus parameters: sharpness `beta`, slope `eta`, weight `nu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    pub beta: f64,
    pub eta: f64,
    pub nu: f64,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams { beta: 100.0, eta: 1.0, nu: 1.0 }
    }
}

impl SmoothingParams {
    pub fn new(beta: f64, eta: f64, nu: f64) -> Result<Self> {
        if !(beta > 0.0) || !(eta > 0.0) || !(nu > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothing needs beta, eta, nu > 0 (got {beta}, {eta}, {nu})"
            )));
        }
        Ok(SmoothingParams { beta, eta, nu })
    }
}

/// How the raw cut depth is mapped before evaluating the enclosure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaMap {
    Clamp,
    Smooth(SmoothingParams),
}

impl AlphaMap {
    pub fn new(smoothing: SmoothingParams, use_smoothing: bool) -> Self {
        if use_smoothing {
            AlphaMap::Smooth(smoothing)
        } else {
            AlphaMap::Clamp
        }
    }
}

pub fn alpha_of(ell: &Ellipsoid, hs: &Halfspace) -> Result<f64> {
    check_dim(ell, hs.normal.len())?;
    let q = ell.shape.as_mat();
    let aqa = q.quad_form(&hs.normal);
    if aqa <= DEGENERATE_TOL {
        return Err(Error::DegenerateDirection(aqa));
    }
    Ok((dot(&hs.normal, &ell.center) - hs.offset) / aqa.sqrt())
}

pub fn clamp_alpha(alpha: f64, n: usize) -> f64 {
    generic_clamp(alpha, n)
}

#[inline]
pub(crate) fn generic_clamp<S: Real>(alpha: S, n: usize) -> S {
    let floor = -1.0 / n as f64;
    if alpha.value() >= floor {
        alpha
    } else {
        S::cst(floor)
    }
}

/// `ln(1 + nu exp(eta beta (alpha + 1/n))) / beta - 1/n - ln(1 + nu) / beta`.
pub fn smooth_clamp_alpha(alpha: f64, n: usize, p: &SmoothingParams) -> f64 {
    generic_smooth(alpha, n, p)
}

pub(crate) fn generic_smooth<S: Real>(alpha: S, n: usize, p: &SmoothingParams) -> S {
    let inv_n = 1.0 / n as f64;
    let t = (alpha + inv_n) * (p.eta * p.beta);
    // ln(1 + nu e^t) = t + ln(e^-t + nu) for t > 0, avoiding overflow.
    let softplus = if t.value() > 0.0 { t + ((-t).exp() + p.nu).ln() } else { (t.exp() * p.nu + 1.0).ln() };
    softplus / p.beta - inv_n - (1.0 + p.nu).ln() / p.beta
}

#[inline]
pub(crate) fn map_alpha<S: Real>(alpha: S, n: usize, map: &AlphaMap) -> S {
    match map {
        AlphaMap::Clamp => generic_clamp(alpha, n),
        AlphaMap::Smooth(p) => generic_smooth(alpha, n, p),
    }
}

#[inline]
pub(crate) fn generic_coefficients<S: Real>(alpha: S, n: usize) -> CutCoefficients<S> {
    let nf = n as f64;
    let one_n_alpha = alpha * nf + 1.0;
    CutCoefficients {
        alpha,
        tau: one_n_alpha / (nf + 1.0),
        sigma_cut: one_n_alpha * 2.0 / ((alpha + 1.0) * (nf + 1.0)),
        delta: (S::one() - alpha * alpha) * (nf * nf / (nf * nf - 1.0)),
    }
}

pub fn cut_coefficients(alpha_used: f64, n: usize) -> Result<CutCoefficients> {
    if alpha_used >= 1.0 || alpha_used <= -1.0 {
        return Err(Error::OutOfRange(alpha_used));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("cut coefficients need n >= 2".into()));
    }
    Ok(generic_coefficients(alpha_used, n))
}

/// Result of cutting `E(Q, c)` with `H(a, b)` at any scalar level.
#[derive(Clone, Debug)]
pub struct CutOutcome<S> {
    pub center: Vec<S>,
    pub shape: Mat<S>,
    /// Raw relative depth before the clamp or smoothing.
    pub alpha: S,
}

/// Enclosure kernel shared by the public API and the transcription.
///
/// Assumes `a'Qa > 0`; returns `DegenerateDirection` otherwise. Range checks
/// on `alpha` are left to callers; a mapped depth above 1 is treated as 1.
pub(crate) fn cut_kernel<S: Real>(q: &Mat<S>, c: &[S], a: &[S], b: S, map: &AlphaMap) -> Result<CutOutcome<S>> {
    let n = c.len();
    let qa = q.mat_vec(a);
    let aqa = dot(a, &qa);
    if aqa.value() <= DEGENERATE_TOL {
        return Err(Error::DegenerateDirection(aqa.value()));
    }
    let root = aqa.sqrt();
    let alpha = (dot(a, c) - b) / root;
    if matches!(map, AlphaMap::Clamp) && alpha.value() <= -1.0 / n as f64 {
        return Ok(CutOutcome { center: c.to_vec(), shape: q.clone(), alpha });
    }
    let mut used = map_alpha(alpha, n, map);
    // Past the tangent plane the formulas lose definiteness; hold the point limit.
    if used.value() > 1.0 {
        used = S::one();
    }
    let co = generic_coefficients(used, n);
    let step = co.tau / root;
    let center = c.iter().zip(&qa).map(|(ci, qi)| *ci - *qi * step).collect();
    let w = co.sigma_cut / aqa;
    let shape = Mat::from_fn(n, n, |i, j| (q[(i, j)] - qa[i] * qa[j] * w) * co.delta).symmetrize();
    Ok(CutOutcome { center, shape, alpha })
}

fn check_dim(ell: &Ellipsoid, n: usize) -> Result<()> {
    if ell.dim() != n {
        return Err(Error::DimensionMismatch(format!("ellipsoid in R^{} vs vector in R^{n}", ell.dim())));
    }
    Ok(())
}

/// Minimum-volume ellipsoid containing `ell ∩ hs` (or a smooth conservative
/// variant when `use_smoothing`).
pub fn loewner_john_cut(ell: &Ellipsoid, hs: &Halfspace, p: &SmoothingParams, use_smoothing: bool) -> Result<Ellipsoid> {
    check_dim(ell, hs.normal.len())?;
    if ell.dim() < 2 {
        return Err(Error::InvalidArgument("cuts need dimension >= 2".into()));
    }
    let alpha = alpha_of(ell, hs)?;
    if alpha > 1.0 {
        return Err(Error::EmptyIntersection(alpha));
    }
    let out = cut_kernel(ell.shape.as_mat(), &ell.center, &hs.normal, hs.offset, &AlphaMap::new(*p, use_smoothing))?;
    // The formulas keep R PSD up to round-off; clip the residue before validation.
    let shape = clip_psd(out.shape);
    Ellipsoid::new(SymPsdMatrix::new(shape)?, out.center)
}

pub(crate) fn clip_psd(m: Mat<f64>) -> Mat<f64> {
    let min = m.min_eigenvalue();
    if min < 0.0 && min >= -PSD_TOL {
        let (ev, vecs) = m.sym_eigen();
        let n = m.rows();
        Mat::from_fn(n, n, |i, j| (0..n).map(|k| ev[k].max(0.0) * vecs[(i, k)] * vecs[(j, k)]).sum())
    } else {
        m
    }
}

/// Enclosures of both sides of the plane `a'x = b`.
pub fn partition_pair(
    ell: &Ellipsoid,
    hs: &Halfspace,
    p: &SmoothingParams,
    use_smoothing: bool,
) -> Result<(Ellipsoid, Ellipsoid)> {
    let alpha = alpha_of(ell, hs)?;
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(Error::EmptyIntersection(alpha));
    }
    Ok((loewner_john_cut(ell, hs, p, use_smoothing)?, loewner_john_cut(ell, &hs.flipped(), p, use_smoothing)?))
}

/// Membership with a pseudo-inverse on `range(Q)`.
pub fn contains(ell: &Ellipsoid, x: &[f64], tol: f64) -> bool {
    x.len() == ell.dim() && membership_excess(ell, x) <= tol
}

/// `max(q - 1, r)` where `q` is the quadratic form on the range of the shape
/// matrix and `r` the largest offset along its null space.
pub fn membership_excess(ell: &Ellipsoid, x: &[f64]) -> f64 {
    assert_eq!(x.len(), ell.dim(), "point has wrong dimension");
    let diff: Vec<f64> = x.iter().zip(&ell.center).map(|(a, b)| a - b).collect();
    let (ev, vecs) = ell.shape.as_mat().sym_eigen();
    let cutoff = 1e-12 * ev.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut q = 0.0;
    let mut off = 0.0_f64;
    for (k, lam) in ev.iter().enumerate() {
        let y: f64 = (0..diff.len()).map(|i| vecs[(i, k)] * diff[i]).sum();
        if *lam > cutoff {
            q += y * y / lam;
        } else {
            off = off.max(y.abs());
        }
    }
    (q - 1.0).max(off)
}

/// Uniform samples from `E(Q, c) ∩ H(a, b)`.
///
/// In whitened coordinates the cut is the slab `t = e'y <= -alpha` of the
/// unit ball. The slab coordinate is drawn by rejection against its
/// marginal density `(1 - t²)^((n-1)/2)`, the rest uniformly from the
/// `(n-1)`-ball of radius `sqrt(1 - t²)`.
pub fn sample_in_cut(ell: &Ellipsoid, hs: &Halfspace, seed: u64, count: usize) -> Result<Vec<Vec<f64>>> {
    check_dim(ell, hs.normal.len())?;
    let l = ell
        .shape
        .as_mat()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("sampling needs a nonsingular shape matrix".into()))?;
    let alpha = alpha_of(ell, hs)?;
    if alpha > 1.0 {
        return Err(Error::EmptyIntersection(alpha));
    }
    let n = ell.dim();
    let lt_a = l.tr_vec(&hs.normal);
    let root = norm(&lt_a);
    let e: Vec<f64> = lt_a.iter().map(|v| v / root).collect();
    let t_max = (-alpha).min(1.0);
    let half = (n as f64 - 1.0) / 2.0;
    let density = |t: f64| (1.0 - t * t).max(0.0).powf(half);
    let peak = if t_max >= 0.0 { 1.0 } else { density(t_max) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut draws = 0usize;
    while out.len() < count {
        draws += 1;
        let t = -1.0 + (t_max + 1.0) * rng.random::<f64>();
        if rng.random::<f64>() * peak <= density(t) {
            let mut d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let along = dot(&d, &e);
            d.iter_mut().zip(&e).for_each(|(di, ei)| *di -= along * ei);
            let len = norm(&d);
            let r = if n > 1 && len > 0.0 {
                (1.0 - t * t).max(0.0).sqrt() * rng.random::<f64>().powf(1.0 / (n as f64 - 1.0)) / len
            } else {
                0.0
            };
            // Shrink by a hair so the affine image stays inside under round-off.
            let y: Vec<f64> = d.iter().zip(&e).map(|(di, ei)| (t * ei + r * di) * (1.0 - 1e-12)).collect();
            let x: Vec<f64> = l.mat_vec(&y).iter().zip(&ell.center).map(|(a, b)| a + b).collect();
            if hs.contains(&x) && contains(ell, &x, 1e-12) {
                out.push(x);
            }
        }
        if draws >= 1_000_000 && (out.len() as f64) < 1e-4 * draws as f64 {
            return Err(Error::ExhaustedRejection { accepted: out.len(), draws });
        }
    }
    Ok(out)
}

/// Uniform samples from `E(Q, c)` (no cut).
pub fn sample_in_ellipsoid(ell: &Ellipsoid, seed: u64, count: usize) -> Result<Vec<Vec<f64>>> {
    let l = ell
        .shape
        .as_mat()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("sampling needs a nonsingular shape matrix".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| uniform_in_ellipsoid(&mut rng, &l, &ell.center, ell.dim())).collect())
}

pub(crate) fn uniform_in_ball<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let len = norm(&dir);
    let r: f64 = rng.random::<f64>().powf(1.0 / n as f64);
    dir.iter().map(|d| d / len * r).collect()
}

fn uniform_in_ellipsoid<R: Rng>(rng: &mut R, l: &Mat<f64>, c: &[f64], n: usize) -> Vec<f64> {
    // Shrink by a hair so the affine image stays inside under round-off.
    let u: Vec<f64> = uniform_in_ball(rng, n).into_iter().map(|v| v * (1.0 - 1e-12)).collect();
    l.mat_vec(&u).iter().zip(c).map(|(a, b)| a + b).collect()
}

/// `0.5 * logdet(Q)`; the unit-ball volume factor is omitted.
pub fn log_volume(ell: &Ellipsoid) -> f64 {
    let (ev, _) = ell.shape.as_mat().sym_eigen();
    if ev.iter().any(|&v| v <= 0.0) {
        return f64::NEG_INFINITY;
    }
    0.5 * ev.iter().map(|v| v.ln()).sum::<f64>()
}
