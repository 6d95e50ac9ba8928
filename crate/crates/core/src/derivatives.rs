//! Forward-mode differentiation with fixed-width dual numbers.
//!
//! Every numeric routine in the crate is written against [`Real`], which is
//! implemented by `f64` and by [`Dual<T, W>`] for any `T: Real`. Nesting
//! duals (`Dual<Dual<f64, 16>, 1>`) gives the mixed second derivatives that
//! the sequential transcription needs: the linearization inside a rollout is
//! itself differentiated with respect to the decision vector.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Scalar field used throughout the crate.
pub trait Real:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    fn cst(v: f64) -> Self;
    /// Primal value, stripping every tangent level.
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, p: f64) -> Self;
    fn abs(self) -> Self;
    /// True iff the value and every tangent component are finite.
    fn all_finite(&self) -> bool;
    /// True iff every tangent component, at every level, is exactly zero.
    fn is_constant(&self) -> bool;

    #[inline]
    fn zero() -> Self {
        Self::cst(0.0)
    }
    #[inline]
    fn one() -> Self {
        Self::cst(1.0)
    }
    #[inline]
    fn sqr(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
    #[inline]
    fn is_constant(&self) -> bool {
        true
    }
}

/// Value plus `W` directional derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T, const W: usize> {
    pub re: T,
    pub eps: [T; W],
}

impl<T: Real, const W: usize> Dual<T, W> {
    #[inline]
    pub fn constant(re: T) -> Self {
        Dual { re, eps: [T::zero(); W] }
    }

    /// Seeds tangent slot `slot` with 1.
    #[inline]
    pub fn variable(re: T, slot: usize) -> Self {
        let mut d = Self::constant(re);
        d.eps[slot] = T::one();
        d
    }

    /// Applies a scalar function with value `f` and derivative `df` at `re`.
    #[inline]
    fn chain(self, f: T, df: T) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = *e * df;
        }
        Dual { re: f, eps }
    }
}

impl<T: Real, const W: usize> Add for Dual<T, W> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for i in 0..W {
            self.eps[i] += rhs.eps[i];
        }
        self
    }
}

impl<T: Real, const W: usize> Sub for Dual<T, W> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for i in 0..W {
            self.eps[i] -= rhs.eps[i];
        }
        self
    }
}

impl<T: Real, const W: usize> Mul for Dual<T, W> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [T::zero(); W];
        for i in 0..W {
            eps[i] = self.re * rhs.eps[i] + self.eps[i] * rhs.re;
        }
        Dual { re: self.re * rhs.re, eps }
    }
}

impl<T: Real, const W: usize> Div for Dual<T, W> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.re / rhs.re;
        let mut eps = [T::zero(); W];
        for i in 0..W {
            eps[i] = (self.eps[i] - q * rhs.eps[i]) / rhs.re;
        }
        Dual { re: q, eps }
    }
}

impl<T: Real, const W: usize> Neg for Dual<T, W> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for e in self.eps.iter_mut() {
            *e = -*e;
        }
        self
    }
}

impl<T: Real, const W: usize> Add<f64> for Dual<T, W> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re = self.re + rhs;
        self
    }
}

impl<T: Real, const W: usize> Sub<f64> for Dual<T, W> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re = self.re - rhs;
        self
    }
}

impl<T: Real, const W: usize> Mul<f64> for Dual<T, W> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.re = self.re * rhs;
        for e in self.eps.iter_mut() {
            *e = *e * rhs;
        }
        self
    }
}

impl<T: Real, const W: usize> Div<f64> for Dual<T, W> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

macro_rules! assign_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl<T: Real, const W: usize> $tr for Dual<T, W> {
            #[inline]
            fn $m(&mut self, rhs: Self) {
                *self = *self $op rhs;
            }
        }
    };
}
assign_op!(AddAssign, add_assign, +);
assign_op!(SubAssign, sub_assign, -);
assign_op!(MulAssign, mul_assign, *);
assign_op!(DivAssign, div_assign, /);

impl<T: Real, const W: usize> Real for Dual<T, W> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self::constant(T::cst(v))
    }
    #[inline]
    fn value(&self) -> f64 {
        self.re.value()
    }
    #[inline]
    fn sin(self) -> Self {
        let (s, c) = (self.re.sin(), self.re.cos());
        self.chain(s, c)
    }
    #[inline]
    fn cos(self) -> Self {
        let (s, c) = (self.re.sin(), self.re.cos());
        self.chain(c, -s)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::one() / (s * 2.0))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.chain(self.re.ln(), T::one() / self.re)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let pm1 = self.re.powi(n - 1);
        self.chain(pm1 * self.re, pm1 * (n as f64))
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        let pm1 = self.re.powf(p - 1.0);
        self.chain(pm1 * self.re, pm1 * p)
    }
    #[inline]
    fn abs(self) -> Self {
        if self.re.value() < 0.0 {
            -self
        } else {
            self
        }
    }
    #[inline]
    fn all_finite(&self) -> bool {
        self.re.all_finite() && self.eps.iter().all(|e| e.all_finite())
    }
    #[inline]
    fn is_constant(&self) -> bool {
        self.re.is_constant() && self.eps.iter().all(|e| e.value() == 0.0 && e.is_constant())
    }
}

/// A smooth map `R^n -> R^m` that can be evaluated at any [`Real`].
pub trait VectorFn: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval<S: Real>(&self, x: &[S]) -> Result<Vec<S>>;
}

impl<F: VectorFn> VectorFn for &F {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn eval<S: Real>(&self, x: &[S]) -> Result<Vec<S>> {
        (**self).eval(x)
    }
}

/// Tangents carried per forward pass when differentiating a [`VectorFn`].
pub const JACOBIAN_CHUNK: usize = 4;

fn check_dims<F: VectorFn>(f: &F, n: usize) -> Result<()> {
    if n != f.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "function expects {} inputs, got {}",
            f.input_dim(),
            n
        )));
    }
    Ok(())
}

/// Value and Jacobian of `f` at `x`, for any scalar level `S`.
///
/// Runs `ceil(n / JACOBIAN_CHUNK)` forward passes, each seeding a block of
/// unit tangents.
pub fn value_and_jacobian<S: Real, F: VectorFn>(f: &F, x: &[S]) -> Result<(Vec<S>, Mat<S>)> {
    check_dims(f, x.len())?;
    let n = x.len();
    let m = f.output_dim();
    let mut jac = Mat::zeros(m, n);
    let mut value = None;
    let mut seeded: Vec<Dual<S, JACOBIAN_CHUNK>> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut start = 0;
    loop {
        let end = (start + JACOBIAN_CHUNK).min(n);
        for (j, d) in seeded.iter_mut().enumerate() {
            *d = if (start..end).contains(&j) {
                Dual::variable(d.re, j - start)
            } else {
                Dual::constant(d.re)
            };
        }
        let out = f.eval(&seeded)?;
        if out.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "function declared {} outputs, produced {}",
                m,
                out.len()
            )));
        }
        if let Some(bad) = out.iter().position(|o| !o.re.all_finite()) {
            return Err(Error::Domain(format!("output {bad} is not finite")));
        }
        for (i, o) in out.iter().enumerate() {
            for j in start..end {
                jac[(i, j)] = o.eps[j - start];
            }
        }
        if value.is_none() {
            value = Some(out.iter().map(|o| o.re).collect());
        }
        start = end;
        if start >= n {
            break;
        }
    }
    // n == 0 still runs one pass above, so value is always set.
    Ok((value.unwrap_or_default(), jac))
}

pub fn jacobian<F: VectorFn>(f: &F, x: &[f64]) -> Result<Mat<f64>> {
    value_and_jacobian(f, x).map(|(_, j)| j)
}

/// Gradient of a scalar-valued function.
pub fn gradient<F: VectorFn>(f: &F, x: &[f64]) -> Result<Vec<f64>> {
    if f.output_dim() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "gradient needs a scalar function, got {} outputs",
            f.output_dim()
        )));
    }
    let j = jacobian(f, x)?;
    Ok(j.row(0).to_vec())
}

/// Central-difference Jacobian with per-coordinate step `h * max(1, |x_j|)`.
pub fn central_difference<F: VectorFn>(f: &F, x: &[f64], h: f64) -> Result<Mat<f64>> {
    check_dims(f, x.len())?;
    let m = f.output_dim();
    let mut jac = Mat::zeros(m, x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let step = h * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        let fp = f.eval(&xp)?;
        xp[j] = x[j] - step;
        let fm = f.eval(&xp)?;
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |J - J_fd| / max(1, |J_fd|)` over all entries.
    pub max_rel_error: f64,
    /// Entry `(row, col)` attaining the maximum.
    pub worst_entry: (usize, usize),
    pub tol: f64,
    pub passed: bool,
}

/// Compares the dual-number Jacobian against central differences.
pub fn fd_check<F: VectorFn>(f: &F, x: &[f64], tol: f64) -> Result<FdReport> {
    let jac = jacobian(f, x)?;
    let fd = central_difference(f, x, 1e-6)?;
    let mut worst = (0, 0);
    let mut max_rel = 0.0_f64;
    for i in 0..jac.rows() {
        for j in 0..jac.cols() {
            let rel = (jac[(i, j)] - fd[(i, j)]).abs() / fd[(i, j)].abs().max(1.0);
            if rel > max_rel || rel.is_nan() {
                max_rel = rel;
                worst = (i, j);
            }
        }
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        worst_entry: worst,
        tol,
        passed: max_rel <= tol,
    })
}
