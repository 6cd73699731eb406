//! Naive dense linear algebra on row-major `Vec<Vec<f64>>` matrices.
//!
//! Gauss-Jordan with partial pivoting. Slow and simple on purpose: these
//! routines provide an inversion route that shares nothing with the Cholesky
//! path used by the production code.

/// Inverse via Gauss-Jordan elimination with partial pivoting.
///
/// Returns `None` when a pivot underflows to (numerical) zero.
pub fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    assert!(a.iter().all(|row| row.len() == n), "matrix must be square");
    // Augmented [A | I], reduced in place.
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
            .unwrap();
        if aug[pivot_row][col].abs() < 1e-300 {
            return None;
        }
        aug.swap(col, pivot_row);
        let pivot = aug[col][col];
        for x in aug[col].iter_mut() {
            *x /= pivot;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = aug[row][col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..2 * n {
                aug[row][k] -= factor * aug[col][k];
            }
        }
    }
    Some(aug.into_iter().map(|row| row[n..].to_vec()).collect())
}

/// Determinant via LU decomposition with partial pivoting.
pub fn determinant(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    assert!(a.iter().all(|row| row.len() == n), "matrix must be square");
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot_row][col] == 0.0 {
            return 0.0;
        }
        if pivot_row != col {
            m.swap(col, pivot_row);
            det = -det;
        }
        det *= m[col][col];
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    det
}
