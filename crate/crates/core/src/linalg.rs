//! Vector helpers, Gram-matrix eigendecomposition and Gram–Schmidt QR.

use nalgebra::{DMatrix, SymmetricEigen};

pub use crate::tensor::kernels::dot;

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= alpha);
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Eigenpairs of a symmetric `n×n` row-major matrix, eigenvalues
/// descending. Eigenvectors are returned as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    debug_assert_eq!(a.len(), n * n);
    let m = DMatrix::from_row_slice(n, n, a);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, vectors)
}

/// Orthonormalizes `columns` in place order by modified Gram–Schmidt with
/// one re-orthogonalization pass. A column whose residual norm falls below
/// `rel_tol` times its original norm is treated as dependent and dropped.
/// Returns the orthonormal columns and the indices of the kept inputs.
pub fn orthonormalize(columns: Vec<Vec<f64>>, rel_tol: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(columns.len());
    let mut kept = Vec::with_capacity(columns.len());
    for (i, mut c) in columns.into_iter().enumerate() {
        let original = norm(&c);
        if original == 0.0 || !original.is_finite() {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let r = dot(q, &c);
                axpy(-r, q, &mut c);
            }
        }
        let n = norm(&c);
        if n <= rel_tol * original {
            continue;
        }
        scale(1.0 / n, &mut c);
        basis.push(c);
        kept.push(i);
    }
    (basis, kept)
}

/// Largest absolute deviation of `QᵀQ` from the identity.
pub fn gram_error(columns: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..columns.len() {
        for j in 0..=i {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(&columns[i], &columns[j]) - target).abs());
        }
    }
    worst
}
