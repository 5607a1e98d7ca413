//! Oracle helpers shared by the integration tests. Nothing here calls into the
//! crate's own Kronecker or solver code.
#![allow(dead_code)]

use kgp::linalg::DenseMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_na(a: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

pub fn from_na(a: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Textbook Kronecker product, entry by entry.
pub fn brute_kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = (b.nrows(), b.ncols());
    DMatrix::from_fn(a.nrows() * p, a.ncols() * q, |i, j| a[(i / p, j / q)] * b[(i % p, j % q)])
}

pub fn brute_kron_all(fs: &[DMatrix<f64>]) -> DMatrix<f64> {
    fs[1..].iter().fold(fs[0].clone(), |acc, f| brute_kron(&acc, f))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Well-conditioned SPD matrix: B·Bᵀ + n·I.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let b = random_matrix(rng, n, n);
    &b * b.transpose() + DMatrix::identity(n, n) * n as f64
}

pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Dense log-determinant via nalgebra's Cholesky.
pub fn chol_logdet(a: &DMatrix<f64>) -> f64 {
    let l = a.clone().cholesky().expect("SPD").l();
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}
