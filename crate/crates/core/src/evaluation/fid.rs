//! Frechet distance between Gaussian fits of feature embeddings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::pairwise_sum;

/// Ridge added to covariances estimated from `n <= dim` samples.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
/// Eigenvalues below `-NEGATIVE_EIGEN_TOL * max(1, |lambda_max|)` are rejected.
pub const NEGATIVE_EIGEN_TOL: f64 = 1e-8;
/// Allowed `max|m - m^T| / max(1, max|m|)`.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Linalg(format!(
            "{}x{} matrix is not square",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Linalg(format!(
            "matrix is not symmetric (max |m - m^T| = {asym:e})"
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sqrt_spd input".to_string()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.amax().max(1.0);
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -NEGATIVE_EIGEN_TOL * top {
            return Err(Error::Linalg(format!("matrix is indefinite (eigenvalue {l:e})")));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Mean and covariance of a set of feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMoments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureMoments {
    /// Unbiased estimate from `rows`; adds [`COVARIANCE_RIDGE`] when `n <= dim`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Metrics(format!("{n} feature rows; at least 2 are required")));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Metrics("feature rows are empty or ragged".to_string()));
        }
        let mu = DVector::from_fn(d, |j, _| {
            pairwise_sum(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()) / n as f64
        });
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mu[j]);
        let mut sigma = centered.transpose() * &centered / (n as f64 - 1.0);
        if n <= d {
            for j in 0..d {
                sigma[(j, j)] += COVARIANCE_RIDGE;
            }
        }
        Ok(FeatureMoments { mu, sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `|mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2})`.
///
/// The trace term uses `(S_r^{1/2} S_f S_r^{1/2})^{1/2}`, which has the same
/// spectrum as `(S_r S_f)^{1/2}` and stays symmetric.
pub fn fid(real: &FeatureMoments, fake: &FeatureMoments) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(Error::shape(
            "fid",
            format!("feature dims {} and {}", real.dim(), fake.dim()),
        ));
    }
    let diff = &real.mu - &fake.mu;
    let a = sqrt_spd(&real.sigma)?;
    let inner = &a * &fake.sigma * &a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_spd(&inner)?.trace();
    Ok(diff.norm_squared() + real.sigma.trace() + fake.sigma.trace() - 2.0 * cross)
}
