//! Small dense linear-algebra helpers shared by the other modules.
//!
//! Everything here operates on `f64` matrices at desk scale (dimensions of a
//! few tens at most), so plain dense algorithms are used throughout.

use nalgebra::{DMatrix, DVector};

/// Symmetrize a matrix in place: `(M + M^T)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, returned ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let sym = symmetrize(m);
    let mut ev: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    DVector::from_vec(ev)
}

/// Minimum and maximum eigenvalue of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = sym_eigenvalues(m);
    (ev[0], ev[ev.len() - 1])
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    sym_eig_range(m).0
}

/// Maximum eigenvalue of a symmetric matrix.
pub fn max_eig(m: &DMatrix<f64>) -> f64 {
    sym_eig_range(m).1
}

/// Spectral radius `ρ(M)` (largest eigenvalue modulus) of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Operator 2-norm (largest singular value).
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    max_eig(&gram).max(0.0).sqrt()
}

/// Condition number `λ_max/λ_min` of a symmetric positive definite matrix.
pub fn cond_spd(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = sym_eig_range(m);
    hi / lo
}

/// Symmetric positive semidefinite square root via eigendecomposition.
/// Slightly negative eigenvalues (roundoff) are clamped to zero.
pub fn sqrtm_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// True when every entry is finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// True when every entry of the vector is finite.
pub fn vec_all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Error from the discrete Lyapunov fixed-point iteration.
#[derive(Debug, Clone, thiserror::Error)]
pub enum LyapunovError {
    #[error("discrete Lyapunov iteration diverged (spectral radius >= 1?)")]
    Diverged,
    #[error("discrete Lyapunov iteration did not converge within {0} iterations")]
    MaxIter(usize),
}

/// Solve `X = M^T X M + C` for symmetric `C` by fixed-point iteration.
///
/// Converges iff `ρ(M) < 1`; divergence is detected by a norm blow-up.
pub fn dlyap(
    m: &DMatrix<f64>,
    c: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>, LyapunovError> {
    let mut x = c.clone();
    let mt = m.transpose();
    for _ in 0..max_iter {
        let next = symmetrize(&(&mt * &x * m + c));
        let diff = (&next - &x).abs().max();
        x = next;
        if !x.iter().all(|v| v.is_finite()) || x.abs().max() > 1e14 {
            return Err(LyapunovError::Diverged);
        }
        if diff <= tol * (1.0 + x.abs().max()) {
            return Ok(x);
        }
    }
    Err(LyapunovError::MaxIter(max_iter))
}

/// Frobenius norm of the difference of two matrices.
pub fn frob_dist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}
