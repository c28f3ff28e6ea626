use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Negative eigenvalues below this magnitude are treated as round-off.
pub const EIGEN_WARN_THRESHOLD: f64 = 1e-6;

/// Gaussian fit of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::domain(format!(
                "covariance {}x{} does not match mean of length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased sample covariance of the rows.
    pub fn from_embeddings(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: rows.len(),
            });
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::domain(format!(
                "embedding lengths differ: {d} vs {}",
                bad.len()
            )));
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues clipped at zero, warning if any was meaningfully negative.
fn clipped_eigen(m: &DMatrix<f64>, what: &str) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    let worst = eig.eigenvalues.iter().cloned().fold(0.0, f64::min);
    if worst < -EIGEN_WARN_THRESHOLD {
        log::warn!("{what}: clipping negative eigenvalue {worst:e} to 0");
    }
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    eig
}

/// PSD square root by eigendecomposition.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = clipped_eigen(m, "sqrtm");
    let root = eig.eigenvalues.map(f64::sqrt);
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The trace of `(Σa Σb)^{1/2}` is taken from the symmetric matrix
/// `Σa^{1/2} Σb Σa^{1/2}`, which has the same eigenvalues.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::domain(format!(
            "statistics dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let cov_a = symmetrize(&a.cov);
    let cov_b = symmetrize(&b.cov);
    let root_a = sqrtm_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let cross: f64 = clipped_eigen(&inner, "fid")
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}
