//! Symmetric eigendecomposition backed by faer.
//!
//! nalgebra's `symmetric_eigen` loses accuracy on matrices whose eigenvalues
//! span several orders of magnitude, which interior-point iterates do as
//! they approach the boundary of the cone.

use nalgebra::{DMatrix, DVector};

/// Eigenvalues (ascending) and orthonormal eigenvectors of the symmetric part
/// of `a`; only the lower triangle is read.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(i, j)]);
    let e = m.selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = e.s().column_vector();
    let u = e.u();
    (
        DVector::from_fn(n, |i, _| s[i]),
        DMatrix::from_fn(n, n, |i, j| u[(i, j)]),
    )
}

pub fn sym_eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    let n = a.nrows();
    if n == 0 {
        return DVector::zeros(0);
    }
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(i, j)]);
    let s = m
        .selfadjoint_eigenvalues(faer::Side::Lower);
    DVector::from_vec(s)
}

/// Smallest eigenvalue; `+inf` for an empty matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_wide_spectrum() {
        let q = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) as f64).sin());
        let (qq, _) = q.qr().unpack();
        let d = DVector::from_vec(vec![1e-9, 1e-6, 1e-3, 1.0, 1e3]);
        let a = &qq * DMatrix::from_diagonal(&d) * qq.transpose();
        let (vals, vecs) = sym_eigen(&a);
        let r = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((r - &a).amax() < 1e-12);
        assert!(vals.as_slice().windows(2).all(|w| w[0] <= w[1]));
        assert!((min_eigenvalue(&a) - 1e-9).abs() < 1e-12);
    }
}
