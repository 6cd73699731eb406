//! Small dense symmetric positive definite helpers.
//!
//! The factorization is hand-rolled rather than delegated so failures can
//! name the offending pivot, which callers surface in their errors. Problem
//! dimensions here are the number of individual parameters (single digits),
//! so plain O(p^3) loops are the right tool.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Fails with the zero-based pivot index and its value as soon as a
/// diagonal entry of the factor would be non-positive or non-finite.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            x[i] -= lik * x[k];
        }
        x[i] /= l[(i, i)];
    }
    x
}

/// Solve `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for k in i + 1..n {
            let lki = l[(k, i)];
            x[i] -= lki * x[k];
        }
        x[i] /= l[(i, i)];
    }
    x
}

/// Solve `A x = b` given the lower Cholesky factor of `A`.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Inverse of `A` from its lower Cholesky factor, symmetrized exactly.
pub fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let e = DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 });
        let col = cholesky_solve(l, &e);
        inv.set_column(j, &col);
    }
    symmetrize(&inv)
}

/// Log determinant of `A` from its lower Cholesky factor.
pub fn cholesky_logdet(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Squared Mahalanobis norm `x^T A^{-1} x` from the lower factor of `A`.
pub fn mahalanobis_sq(l: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    solve_lower(l, x).norm_squared()
}

/// Force exact symmetry by averaging opposing off-diagonal entries.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Eigenvalue-ratio condition estimate of a symmetric matrix.
///
/// Returns infinity when the smallest eigenvalue magnitude underflows.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Clip negative eigenvalues of a symmetric matrix to zero.
///
/// Used to restore positive semidefiniteness of curvature estimates before
/// they are combined with a positive definite prior precision.
pub fn clip_negative_eigenvalues(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let clipped = DVector::from_fn(eig.eigenvalues.len(), |i, _| eig.eigenvalues[i].max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&out)
}
