//! Small dense linear-algebra helpers.
//!
//! Element-wise work stays in the caller's scalar type; decompositions
//! (LU, eigenvalues) are carried out in f64 through nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Result, WfError};
use crate::scalar::Scalar;

pub fn from_rows<T: Scalar>(rows: &[Vec<T>]) -> Result<DMatrix<T>> {
    let n = rows.len();
    if n == 0 {
        return Err(WfError::InvalidParameter("empty matrix".into()));
    }
    let m = rows[0].len();
    for r in rows {
        if r.len() != m {
            return Err(WfError::DimensionMismatch {
                expected: m,
                got: r.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn to_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn to_f64<T: Scalar>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(|x| x.as_f64())
}

pub fn from_f64<T: Scalar>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::lit)
}

pub fn mat_vec<T: Scalar>(a: &DMatrix<T>, x: &[T]) -> Vec<T> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

/// `x^T A y`.
pub fn bilinear<T: Scalar>(a: &DMatrix<T>, x: &[T], y: &[T]) -> T {
    let ay = mat_vec(a, y);
    x.iter().zip(&ay).map(|(&u, &v)| u * v).sum()
}

pub fn max_abs<T: Scalar>(a: &DMatrix<T>) -> T {
    a.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}

pub fn max_abs_diff<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

pub fn determinant<T: Scalar>(a: &DMatrix<T>) -> f64 {
    to_f64(a).determinant()
}

/// `|det A| > 1e-10 * max|A|^M`.
pub fn is_invertible<T: Scalar>(a: &DMatrix<T>) -> bool {
    let scale = max_abs(a).as_f64();
    if scale == 0.0 {
        return false;
    }
    determinant(a).abs() > 1e-10 * scale.powi(a.nrows() as i32)
}

pub fn solve<T: Scalar>(a: &DMatrix<T>, b: &[T]) -> Option<Vec<T>> {
    if !is_invertible(a) {
        return None;
    }
    let lu = to_f64(a).lu();
    let rhs = DVector::from_iterator(b.len(), b.iter().map(|v| v.as_f64()));
    lu.solve(&rhs).map(|v| v.iter().map(|&x| T::lit(x)).collect())
}

/// Ascending eigenvalues of the symmetric part of `a`.
pub fn symmetric_eigenvalues<T: Scalar>(a: &DMatrix<T>) -> Vec<f64> {
    let m = to_f64(a);
    let sym = (&m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

pub fn eigenvalues<T: Scalar>(a: &DMatrix<T>) -> Vec<Complex<f64>> {
    to_f64(a).complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius<T: Scalar>(a: &DMatrix<T>) -> f64 {
    eigenvalues(a).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Orthonormal (Helmert) basis of the sum-zero subspace of R^M, as the
/// columns of an `M x (M-1)` matrix.
pub fn sum_zero_basis<T: Scalar>(m: usize) -> DMatrix<T> {
    let mut q = DMatrix::<T>::zeros(m, m.saturating_sub(1));
    for k in 1..m {
        let kf = k as f64;
        let norm = (kf * (kf + 1.0)).sqrt();
        for i in 0..k {
            q[(i, k - 1)] = T::lit(1.0 / norm);
        }
        q[(k, k - 1)] = T::lit(-kf / norm);
    }
    q
}

/// `Q^T A Q` for the sum-zero basis `Q`.
pub fn project_to_sum_zero<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    let q = sum_zero_basis::<T>(a.nrows());
    q.transpose() * a * &q
}

/// Square-root factor `L` with `L L^T = S` for a positive semidefinite `S`.
/// Eigenvalues in `[-1e-12, 0)`, and positive ones below `1e-12` times the
/// largest, are treated as zero so that kernel directions stay exact.
pub fn psd_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let floor = 1e-12 * eig.eigenvalues.max().max(0.0);
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let lam = if lam <= floor {
            if lam < -1e-12 {
                return Err(WfError::Numeric(format!(
                    "covariance has negative eigenvalue {lam:e}"
                )));
            }
            0.0
        } else {
            lam
        };
        let r = lam.sqrt();
        for i in 0..scaled.nrows() {
            scaled[(i, k)] *= r;
        }
    }
    Ok(scaled)
}
