//! Dense SPD / PSD helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m).cholesky().ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Matrix square root factor `L` with `L Lᵀ = cov`, from the eigendecomposition
/// of the symmetrized input with negative eigenvalues clamped to zero.
pub fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(cov).symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

/// Cholesky factor of an SPD covariance, falling back to the clamped
/// eigen factor if the matrix is only semidefinite.
pub fn cov_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    match symmetrize(cov).cholesky() {
        Some(c) => c.l(),
        None => psd_factor(cov),
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Draw from `N(mean, L Lᵀ)` given the factor `L`.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    mean + factor * standard_normal_vec(factor.ncols(), rng)
}
