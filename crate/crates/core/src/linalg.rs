//! Small dense row-major matrices over any [`Real`], plus a few
//! `f64`-only factorizations backed by nalgebra.

use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;

use crate::derivatives::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data has wrong length");
        Mat { rows, cols, data }
    }

    pub fn diag(d: &[S]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Lifts an `f64` matrix to scalar level `S` with zero tangents.
    pub fn lift(m: &Mat<f64>) -> Self {
        Mat { rows: m.rows, cols: m.cols, data: m.data.iter().map(|&v| S::cst(v)).collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> Mat<f64> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v.value()).collect() }
    }

    pub fn to_rows(&self) -> Vec<Vec<S>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Mat<S>) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, r) in dst.iter_mut().zip(row) {
                    *d += a * *r;
                }
            }
        }
        out
    }

    /// `self * rhs^T`.
    pub fn matmul_t(&self, rhs: &Mat<S>) -> Self {
        assert_eq!(self.cols, rhs.cols, "matmul_t dimension mismatch");
        Self::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j)))
    }

    pub fn mat_vec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len(), "mat_vec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `self^T * v`.
    pub fn tr_vec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.rows, v.len(), "tr_vec dimension mismatch");
        let mut out = vec![S::zero(); self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += *a * *vi;
            }
        }
        out
    }

    /// `v^T * self * v`.
    pub fn quad_form(&self, v: &[S]) -> S {
        dot(v, &self.mat_vec(v))
    }

    pub fn add(&self, rhs: &Mat<S>) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add dimension mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| *a + *b).collect(),
        }
    }

    pub fn sub(&self, rhs: &Mat<S>) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sub dimension mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| *a - *b).collect(),
        }
    }

    pub fn scale(&self, s: S) -> Self {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| *a * s).collect() }
    }

    /// `(M + M^T) / 2`.
    pub fn symmetrize(&self) -> Self {
        assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)]) * 0.5)
    }

    /// Outer product `u v^T`.
    pub fn outer(u: &[S], v: &[S]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    pub fn frobenius_sq(&self) -> S {
        dot(&self.data, &self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.all_finite())
    }
}

impl<S> Index<(usize, usize)> for Mat<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S> IndexMut<(usize, usize)> for Mat<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn lift_vec<S: Real>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::cst(x)).collect()
}

pub fn values(v: &[impl Real]) -> Vec<f64> {
    v.iter().map(|x| x.value()).collect()
}

impl Mat<f64> {
    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Eigen-decomposition of the symmetric part: `(eigenvalues, eigenvectors as columns)`.
    pub fn sym_eigen(&self) -> (Vec<f64>, Mat<f64>) {
        let eig = nalgebra::SymmetricEigen::new(self.symmetrize().to_nalgebra());
        (eig.eigenvalues.iter().copied().collect(), Mat::from_nalgebra(&eig.eigenvectors))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.sym_eigen().0.into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Lower Cholesky factor, `None` unless positive definite.
    pub fn cholesky(&self) -> Option<Mat<f64>> {
        nalgebra::Cholesky::new(self.symmetrize().to_nalgebra()).map(|c| Mat::from_nalgebra(&c.l()))
    }

    pub fn inverse(&self) -> Option<Mat<f64>> {
        self.to_nalgebra().try_inverse().map(|m| Mat::from_nalgebra(&m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_with_nalgebra() {
        let a = Mat::from_fn(3, 4, |i, j| (i as f64 + 1.0) * 0.5 - j as f64);
        let b = Mat::from_fn(4, 2, |i, j| (i * j) as f64 + 0.25);
        let want = a.to_nalgebra() * b.to_nalgebra();
        assert_eq!(a.matmul(&b), Mat::from_nalgebra(&want));
        assert_eq!(a.matmul_t(&b.transpose()), a.matmul(&b));
        let v = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(a.mat_vec(&v), (a.to_nalgebra() * nalgebra::DVector::from_row_slice(&v)).as_slice());
        assert_eq!(a.transpose().tr_vec(&v), a.mat_vec(&v));
    }

    #[test]
    fn eigen_and_cholesky() {
        let m = Mat::diag(&[4.0, 1.0, 9.0]);
        let (mut ev, _) = m.sym_eigen();
        ev.sort_by(f64::total_cmp);
        assert_eq!(ev, vec![1.0, 4.0, 9.0]);
        let l = m.cholesky().unwrap();
        assert_eq!(l, Mat::diag(&[2.0, 1.0, 3.0]));
        assert!(Mat::<f64>::zeros(2, 2).cholesky().is_none());
    }
}
