//! Small complex-matrix helpers shared by the simulator, tomography, and the
//! PEC superoperator algebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const C_ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const C_ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Eigendecomposition of a Hermitian matrix: real eigenvalues plus the
/// unitary of column eigenvectors, both in nalgebra's ordering.
pub fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let eig = m.clone().symmetric_eigen();
    (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
}

/// Principal square root of a positive semidefinite Hermitian matrix.
/// Eigenvalues below zero (numerical noise) are clipped before the root.
pub fn psd_sqrt(m: &CMat) -> CMat {
    let (vals, vecs) = hermitian_eigen(m);
    let d = CMat::from_diagonal(&CVec::from_iterator(
        vals.len(),
        vals.iter()
            .map(|&v| Complex64::new(v.max(0.0).sqrt(), 0.0)),
    ));
    &vecs * d * vecs.adjoint()
}

/// Largest entrywise deviation |a - e^{i phi} b| minimized over a global
/// phase phi. Used for circuit-equivalence checks where global phase is
/// irrelevant.
pub fn max_abs_diff_up_to_phase(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    // Pick the phase from the largest-magnitude entry of b.
    let mut best = 0.0f64;
    let mut phase = C_ONE;
    for (x, y) in a.iter().zip(b.iter()) {
        if y.norm() > best {
            best = y.norm();
            phase = x / y;
        }
    }
    if best == 0.0 {
        return a.iter().map(|x| x.norm()).fold(0.0, f64::max);
    }
    let phase = phase / phase.norm();
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - phase * y).norm())
        .fold(0.0, f64::max)
}

/// Largest entrywise |a - b|.
pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Kronecker product in the qubit-0-is-leftmost convention.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}
