//! Centered SVD-based PCA for compressing parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{val_err, Result};
use crate::linalg::{thin_svd, DenseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// p × k, orthonormal columns.
    pub basis: DenseMatrix,
    /// n × k.
    pub coefficients: DenseMatrix,
    /// sᵢ²/n for the kept components, non-increasing.
    pub explained_variance: Vec<f64>,
    /// All min(n, p) singular values of the centered data.
    pub singular_values: Vec<f64>,
}

impl Pca {
    /// Σ_{i>k} sᵢ² / n: the mean squared reconstruction error per sample.
    pub fn residual_variance(&self) -> f64 {
        let n = self.coefficients.rows() as f64;
        self.singular_values[self.basis.cols()..].iter().map(|s| s * s).sum::<f64>() / n
    }

    pub fn transform(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let centered = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - self.mean[j]);
        centered.matmul(&self.basis)
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let r = self.coefficients.matmul(&self.basis.transpose()).expect("pca shapes");
        DenseMatrix::from_fn(r.rows(), r.cols(), |i, j| r.get(i, j) + self.mean[j])
    }
}

pub fn pca_reduce(samples: &DenseMatrix, k: usize) -> Result<Pca> {
    let (n, p) = (samples.rows(), samples.cols());
    if k == 0 || k > n.min(p) {
        return val_err(format!("cannot keep {k} components from a {n}x{p} sample matrix"));
    }
    let mean: Vec<f64> = (0..p).map(|j| (0..n).map(|i| samples.get(i, j)).sum::<f64>() / n as f64).collect();
    let centered = DenseMatrix::from_fn(n, p, |i, j| samples.get(i, j) - mean[j]);
    let (u, s, v) = thin_svd(&centered)?;
    let basis = DenseMatrix::from_fn(p, k, |i, j| v.get(i, j));
    let coefficients = DenseMatrix::from_fn(n, k, |i, j| u.get(i, j) * s[j]);
    let explained_variance = s[..k].iter().map(|x| x * x / n as f64).collect();
    Ok(Pca { mean, basis, coefficients, explained_variance, singular_values: s })
}
