//! Row-major dense matrices with faer doing the heavy lifting (GEMM, symmetric
//! eigendecomposition, SVD).

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::DenseSolveCore;
use faer::{Accum, MatMut, MatRef, Par, Side};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, num_err, val_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = String;
    fn try_from(raw: RawMatrix) -> std::result::Result<Self, String> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data).map_err(|e| e.to_string())
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        Self::from_fn(n, n, |i, j| if i == j { d[i] } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector (n×1).
    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return dim_err("hadamard operands differ in shape");
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn squared(&self) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * v).collect() }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return dim_err("subtraction operands differ in shape");
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_diag(&mut self, eps: f64) {
        for i in 0..self.rows.min(self.cols) {
            self.data[i * self.cols + i] += eps;
        }
    }

    /// max |A − Aᵀ|; `f64::INFINITY` for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut m = 0.0_f64;
        for i in 0..self.rows {
            for j in 0..i {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }

    pub fn is_symmetric(&self) -> bool {
        self.is_square() && self.asymmetry() <= 1e-12 * self.max_abs()
    }

    pub fn as_faer(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }

    pub fn from_faer(m: MatRef<'_, f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return dim_err(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_into(&mut out.data, self.as_faer(), other.as_faer());
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return dim_err(format!("matvec: {} columns vs vector of {}", self.cols, v.len()));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// out (row-major, lhs.nrows × rhs.ncols) = lhs · rhs, sequential.
pub(crate) fn gemm_into(out: &mut [f64], lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>) {
    let dst = MatMut::from_row_major_slice_mut(out, lhs.nrows(), rhs.ncols());
    matmul(dst, Accum::Replace, lhs, rhs, 1.0, Par::Seq);
}

/// Symmetric eigendecomposition: returns (U, d) with eigenvalues descending and
/// the i-th column of U the matching eigenvector.
pub fn sym_eig(a: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    if !a.is_square() {
        return val_err(format!("eigendecomposition needs a square matrix, got {}x{}", a.rows, a.cols));
    }
    let n = a.rows;
    let evd = match a.as_faer().self_adjoint_eigen(Side::Lower) {
        Ok(e) => e,
        Err(e) => return num_err(format!("symmetric eigensolver failed: {e:?}")),
    };
    let u = evd.U();
    let s = evd.S().column_vector();
    let d: Vec<f64> = (0..n).rev().map(|i| s[i]).collect();
    let uu = DenseMatrix::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    if d.iter().any(|v| !v.is_finite()) {
        return num_err("symmetric eigensolver produced non-finite eigenvalues");
    }
    Ok((uu, d))
}

/// Thin SVD: (U n×r, s descending, V p×r) with r = min(n, p).
pub fn thin_svd(a: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let svd = match a.as_faer().thin_svd() {
        Ok(s) => s,
        Err(e) => return num_err(format!("svd failed: {e:?}")),
    };
    let s = svd.S().column_vector();
    let r = a.rows.min(a.cols);
    Ok((
        DenseMatrix::from_faer(svd.U()),
        (0..r).map(|i| s[i]).collect(),
        DenseMatrix::from_faer(svd.V()),
    ))
}

/// Inverse via partial-pivot LU; errors when A·A⁻¹ is visibly not I.
pub fn inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return dim_err(format!("cannot invert a {}x{} matrix", a.rows, a.cols));
    }
    let inv = DenseMatrix::from_faer(a.as_faer().partial_piv_lu().inverse().as_ref());
    let resid = a.matmul(&inv)?.sub(&DenseMatrix::identity(a.rows))?.max_abs();
    if !(resid <= 1e-8) {
        return num_err(format!("matrix is singular to working precision (|A·A⁻¹ − I| = {resid:.2e})"));
    }
    Ok(inv)
}

pub fn determinant(a: &DenseMatrix) -> Result<f64> {
    if !a.is_square() {
        return dim_err("determinant needs a square matrix");
    }
    Ok(a.as_faer().determinant())
}

pub fn trace(a: &DenseMatrix) -> f64 {
    a.diag().iter().sum()
}
