//! Kronecker and tensor algebra.
//!
//! Layout convention, used by every module: a lattice field is a row-major
//! tensor with axes ordered (parameter, x₁, …, x_d, time). The flat index of
//! entry (i₀, …, i_{K−1}) is Σ_k i_k Π_{j>k} n_j, so `vec(·)` matches the
//! factor order of `K_0 ⊗ K_1 ⊗ … ⊗ K_{K−1}`.

use faer::MatRef;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, num_err, val_err, Result};
use crate::linalg::{gemm_into, sym_eig, DenseMatrix};

/// Default row count above which a Kronecker operator refuses to densify.
pub const DENSE_THRESHOLD: usize = 4096;

/// Work (flops) above which mode products split across rayon tasks.
const PAR_WORK: usize = 1 << 18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct FieldTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawTensor> for FieldTensor {
    type Error = String;
    fn try_from(raw: RawTensor) -> std::result::Result<Self, String> {
        FieldTensor::new(raw.shape, raw.values).map_err(|e| e.to_string())
    }
}

impl FieldTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return dim_err(format!("tensor of shape {shape:?} needs {n} values, got {}", values.len()));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![v; n] }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }
}

/// Row-major outer product of vectors: entry (i₀,…) = Π v_k[i_k].
pub fn outer(vectors: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![1.0];
    for v in vectors {
        let mut next = Vec::with_capacity(out.len() * v.len());
        for &a in &out {
            next.extend(v.iter().map(|&b| a * b));
        }
        out = next;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KronOperator {
    factors: Vec<DenseMatrix>,
}

impl KronOperator {
    pub fn new(factors: Vec<DenseMatrix>) -> Result<Self> {
        if factors.is_empty() {
            return val_err("Kronecker operator needs at least one factor");
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[DenseMatrix] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.factors
    }

    pub fn into_factors(self) -> Vec<DenseMatrix> {
        self.factors
    }

    pub fn nrows(&self) -> usize {
        self.factors.iter().map(|f| f.rows()).product()
    }

    pub fn ncols(&self) -> usize {
        self.factors.iter().map(|f| f.cols()).product()
    }

    pub fn row_shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rows()).collect()
    }

    pub fn col_shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.cols()).collect()
    }

    /// Dense materialization, refused above `threshold` rows or columns.
    pub fn to_dense(&self, threshold: usize) -> Result<DenseMatrix> {
        let (r, c) = (self.nrows(), self.ncols());
        if r > threshold || c > threshold {
            return val_err(format!("refusing to densify a {r}x{c} Kronecker operator (threshold {threshold})"));
        }
        let mut acc = DenseMatrix::identity(1);
        for f in &self.factors {
            acc = DenseMatrix::from_fn(acc.rows() * f.rows(), acc.cols() * f.cols(), |i, j| {
                acc.get(i / f.rows(), j / f.cols()) * f.get(i % f.rows(), j % f.cols())
            });
        }
        Ok(acc)
    }
}

/// Mode-k product with an arbitrary faer view `a` (m × n_k); `a` may be a
/// transposed view.
fn mode_product_raw(shape: &[usize], x: &[f64], k: usize, a: MatRef<'_, f64>) -> Vec<f64> {
    let pre: usize = shape[..k].iter().product();
    let nk = shape[k];
    let post: usize = shape[k + 1..].iter().product();
    let m = a.nrows();
    debug_assert_eq!(a.ncols(), nk);
    let mut out = vec![0.0; pre * m * post];
    if pre * m * post == 0 {
        return out;
    }
    if nk == 1 && m == 1 {
        let s = a[(0, 0)];
        out.iter_mut().zip(x).for_each(|(o, v)| *o = s * v);
        return out;
    }
    if post == 1 {
        // (pre × nk) · aᵀ
        let work = pre * m * nk;
        if work > PAR_WORK && pre > 1 {
            let tasks = rayon::current_num_threads().max(1);
            let rows_per = pre.div_ceil(tasks).max(1);
            out.par_chunks_mut(rows_per * m).zip(x.par_chunks(rows_per * nk)).for_each(|(o, xi)| {
                let r = xi.len() / nk;
                gemm_into(o, MatRef::from_row_major_slice(xi, r, nk), a.transpose());
            });
        } else {
            gemm_into(&mut out, MatRef::from_row_major_slice(x, pre, nk), a.transpose());
        }
        return out;
    }
    let work = m * nk * post;
    if work * pre > PAR_WORK && pre > 1 {
        out.par_chunks_mut(m * post).zip(x.par_chunks(nk * post)).for_each(|(o, xi)| {
            gemm_into(o, a, MatRef::from_row_major_slice(xi, nk, post));
        });
    } else {
        for (o, xi) in out.chunks_mut(m * post).zip(x.chunks(nk * post)) {
            gemm_into(o, a, MatRef::from_row_major_slice(xi, nk, post));
        }
    }
    out
}

/// `t ×_k a`: multiplies axis k of `t` by the matrix `a` (m × n_k).
pub fn mode_product(t: &FieldTensor, k: usize, a: &DenseMatrix) -> Result<FieldTensor> {
    check_mode(t, k, a.cols())?;
    let values = mode_product_raw(&t.shape, &t.values, k, a.as_faer());
    let mut shape = t.shape.clone();
    shape[k] = a.rows();
    Ok(FieldTensor { shape, values })
}

/// `t ×_k aᵀ` without forming the transpose.
pub fn mode_product_t(t: &FieldTensor, k: usize, a: &DenseMatrix) -> Result<FieldTensor> {
    check_mode(t, k, a.rows())?;
    let values = mode_product_raw(&t.shape, &t.values, k, a.as_faer().transpose());
    let mut shape = t.shape.clone();
    shape[k] = a.cols();
    Ok(FieldTensor { shape, values })
}

fn check_mode(t: &FieldTensor, k: usize, n: usize) -> Result<()> {
    if k >= t.shape.len() {
        return dim_err(format!("mode {k} out of range for a {}-way tensor", t.shape.len()));
    }
    if t.shape[k] != n {
        return dim_err(format!("factor {k} expects axis length {n}, tensor has {}", t.shape[k]));
    }
    Ok(())
}

fn check_conformable(shape: &[usize], cols: &[usize]) -> Result<()> {
    if shape.len() != cols.len() {
        return dim_err(format!("operator has {} factors, tensor has {} axes", cols.len(), shape.len()));
    }
    for (k, (&s, &c)) in shape.iter().zip(cols).enumerate() {
        if s != c {
            return dim_err(format!("factor {k} has {c} columns but tensor axis {k} has length {s}"));
        }
    }
    Ok(())
}

/// `(⊗_k A_k) vec(v)` via successive mode products.
pub fn kron_matvec(op: &KronOperator, v: &FieldTensor) -> Result<FieldTensor> {
    check_conformable(&v.shape, &op.col_shape())?;
    let mut t = v.clone();
    for (k, a) in op.factors.iter().enumerate() {
        t = mode_product(&t, k, a)?;
    }
    Ok(t)
}

/// `(⊗_k A_kᵀ) vec(v)`.
pub fn kron_matvec_t(op: &KronOperator, v: &FieldTensor) -> Result<FieldTensor> {
    check_conformable(&v.shape, &op.row_shape())?;
    let mut t = v.clone();
    for (k, a) in op.factors.iter().enumerate() {
        t = mode_product_t(&t, k, a)?;
    }
    Ok(t)
}

/// Per-factor eigendecompositions of a symmetric Kronecker operator.
#[derive(Clone, Debug)]
pub struct EigFactors {
    /// Columns are eigenvectors, ordered to match `values`.
    pub vectors: Vec<DenseMatrix>,
    /// Descending.
    pub values: Vec<Vec<f64>>,
    /// Absolute jitter actually added to each factor diagonal.
    pub jitters: Vec<f64>,
}

impl EigFactors {
    pub fn shape(&self) -> Vec<usize> {
        self.values.iter().map(|d| d.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.values.iter().map(|d| d.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Eigenvalues of the Kronecker composition in lattice layout.
    pub fn eigenvalue_tensor(&self) -> FieldTensor {
        let refs: Vec<&[f64]> = self.values.iter().map(|d| d.as_slice()).collect();
        FieldTensor { shape: self.shape(), values: outer(&refs) }
    }

    /// All eigenvalues of the composition, descending.
    pub fn sorted_eigenvalues(&self) -> Vec<f64> {
        let mut v = self.eigenvalue_tensor().into_values();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    /// λ_max of the composition as the product of per-factor maxima.
    pub fn max_eigenvalue(&self) -> f64 {
        self.values.iter().map(|d| d[0]).product()
    }

    pub fn u_operator(&self) -> KronOperator {
        KronOperator { factors: self.vectors.clone() }
    }

    /// `(⊗U_k)ᵀ v`.
    pub fn forward(&self, v: &FieldTensor) -> Result<FieldTensor> {
        check_conformable(&v.shape, &self.shape())?;
        let mut t = v.clone();
        for (k, u) in self.vectors.iter().enumerate() {
            t = mode_product_t(&t, k, u)?;
        }
        Ok(t)
    }

    /// `(⊗U_k) w`.
    pub fn backward(&self, w: &FieldTensor) -> Result<FieldTensor> {
        check_conformable(&w.shape, &self.shape())?;
        let mut t = w.clone();
        for (k, u) in self.vectors.iter().enumerate() {
            t = mode_product(&t, k, u)?;
        }
        Ok(t)
    }
}

/// Decomposes one symmetric factor after adding `jitter·mean(diag)` to its
/// diagonal. Returns (U, d descending, absolute jitter).
pub fn eig_factor(a: &DenseMatrix, jitter: f64, index: usize) -> Result<(DenseMatrix, Vec<f64>, f64)> {
    if !a.is_square() {
        return val_err(format!("factor {index} is not square ({}x{})", a.rows(), a.cols()));
    }
    if !a.is_symmetric() {
        return val_err(format!("factor {index} is not symmetric (max asymmetry {:.3e})", a.asymmetry()));
    }
    if !(jitter >= 0.0) {
        return val_err(format!("jitter must be non-negative, got {jitter}"));
    }
    let n = a.rows();
    let mean_diag = a.diag().iter().sum::<f64>() / n.max(1) as f64;
    let eps = jitter * mean_diag;
    let mut k = a.clone();
    k.add_diag(eps);
    if n == 1 {
        return Ok((DenseMatrix::identity(1), vec![k.get(0, 0)], eps));
    }
    let (u, d) = sym_eig(&k).map_err(|e| crate::error::KgpError::Numerical(format!("factor {index}: {e}")))?;
    Ok((u, d, eps))
}

/// Eigendecomposes every factor with relative diagonal jitter.
pub fn eig_factors(op: &KronOperator, jitter: f64) -> Result<EigFactors> {
    let parts: Vec<_> = op
        .factors
        .par_iter()
        .enumerate()
        .map(|(i, f)| eig_factor(f, jitter, i))
        .collect::<Result<Vec<_>>>()?;
    let mut vectors = Vec::with_capacity(parts.len());
    let mut values = Vec::with_capacity(parts.len());
    let mut jitters = Vec::with_capacity(parts.len());
    for (u, d, e) in parts {
        vectors.push(u);
        values.push(d);
        jitters.push(e);
    }
    Ok(EigFactors { vectors, values, jitters })
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return val_err(format!("noise variance must be positive and finite, got {sigma2}"));
    }
    Ok(())
}

/// `(K_Z + σ²I)⁻¹ v = U (Λ + σ²I)⁻¹ Uᵀ v`.
pub fn inverse_apply(eig: &EigFactors, sigma2: f64, v: &FieldTensor) -> Result<FieldTensor> {
    check_sigma2(sigma2)?;
    let mut w = eig.forward(v)?;
    let lam = eig.eigenvalue_tensor();
    for (wi, li) in w.values.iter_mut().zip(&lam.values) {
        *wi /= li + sigma2;
    }
    eig.backward(&w)
}

/// Σ ln xᵢ with one `ln` per block: exponents are summed as integers and
/// mantissas in [1, 2) multiplied, so the running product stays below 2^64.
/// Non-positive, subnormal or non-finite entries go through `ln` directly.
pub fn sum_ln(values: impl IntoIterator<Item = f64>) -> f64 {
    const BLOCK: usize = 64;
    let (mut exps, mut direct, mut prod, mut n) = (0i64, 0.0f64, 1.0f64, 0usize);
    let mut logs = 0.0;
    for x in values {
        if !x.is_normal() || x < 0.0 {
            direct += x.ln();
            continue;
        }
        let bits = x.to_bits();
        exps += ((bits >> 52) & 0x7ff) as i64 - 1023;
        prod *= f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
        n += 1;
        if n == BLOCK {
            logs += prod.ln();
            prod = 1.0;
            n = 0;
        }
    }
    logs + prod.ln() + exps as f64 * std::f64::consts::LN_2 + direct
}

/// `log|K_Z + σ²I| = Σ log(λ_i + σ²)`.
pub fn logdet_from_eigs(eig: &EigFactors, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    let lam = eig.eigenvalue_tensor();
    let min = lam.values.iter().copied().fold(f64::INFINITY, f64::min);
    let sum = sum_ln(lam.values.iter().map(|l| l + sigma2));
    if min + sigma2 <= 0.0 || !sum.is_finite() {
        return num_err(format!("log-determinant undefined: minimum eigenvalue {min:.3e} with noise {sigma2:.3e}"));
    }
    Ok(sum)
}

/// `diag(⊗A_k) = ⊗ diag(A_k)`.
pub fn kron_diag(op: &KronOperator) -> Result<FieldTensor> {
    for (k, f) in op.factors.iter().enumerate() {
        if !f.is_square() {
            return val_err(format!("factor {k} is not square ({}x{})", f.rows(), f.cols()));
        }
    }
    let diags: Vec<Vec<f64>> = op.factors.iter().map(|f| f.diag()).collect();
    let refs: Vec<&[f64]> = diags.iter().map(|d| d.as_slice()).collect();
    Ok(FieldTensor { shape: op.row_shape(), values: outer(&refs) })
}

pub enum RowSqWeights<'a> {
    /// Row sums of `((K_* U) ⊙ (K_* U)) · weights`.
    Eig { eig: &'a EigFactors, weights: &'a FieldTensor },
    /// Row sums of `(K_* ⊙ K_*) · mask`, i.e. `diag(K_* P K_*ᵀ)` for diagonal `P`.
    Mask(&'a FieldTensor),
}

/// Weighted row-norm squares of a Kronecker cross-covariance, computed with
/// `(A⊗B) ⊙ (C⊗D) = (A⊙C) ⊗ (B⊙D)` so nothing is densified.
pub fn row_sq_project(cross: &KronOperator, weights: RowSqWeights<'_>) -> Result<FieldTensor> {
    match weights {
        RowSqWeights::Eig { eig, weights } => {
            if eig.vectors.len() != cross.factors.len() {
                return dim_err(format!(
                    "cross operator has {} factors, eigendecomposition has {}",
                    cross.factors.len(),
                    eig.vectors.len()
                ));
            }
            let sq = cross
                .factors
                .iter()
                .zip(&eig.vectors)
                .enumerate()
                .map(|(k, (c, u))| {
                    if c.cols() != u.rows() {
                        return dim_err(format!("factor {k}: cross has {} columns, eigenvectors {} rows", c.cols(), u.rows()));
                    }
                    Ok(c.matmul(u)?.squared())
                })
                .collect::<Result<Vec<_>>>()?;
            kron_matvec(&KronOperator { factors: sq }, weights)
        }
        RowSqWeights::Mask(mask) => {
            let sq = cross.factors.iter().map(|c| c.squared()).collect();
            kron_matvec(&KronOperator { factors: sq }, mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factors_leave_tensor_unchanged() {
        let op = KronOperator::new(vec![DenseMatrix::identity(2), DenseMatrix::identity(3)]).unwrap();
        let v = FieldTensor::new(vec![2, 3], vec![1., -2., 3., 4., 5., -6.]).unwrap();
        assert_eq!(kron_matvec(&op, &v).unwrap(), v);
    }

    #[test]
    fn diagonal_scaling_example() {
        let op = KronOperator::new(vec![DenseMatrix::from_diag(&[2., 3.]), DenseMatrix::identity(2)]).unwrap();
        let out = kron_matvec(&op, &FieldTensor::filled(vec![2, 2], 1.0)).unwrap();
        assert_eq!(out.values(), &[2., 2., 3., 3.]);
    }

    #[test]
    fn shape_mismatch_names_factor() {
        let op = KronOperator::new(vec![DenseMatrix::identity(2), DenseMatrix::identity(3)]).unwrap();
        let err = kron_matvec(&op, &FieldTensor::zeros(vec![2, 4])).unwrap_err().to_string();
        assert!(err.contains("factor 1"), "{err}");
    }

    #[test]
    fn eig_identity_and_diag() {
        let e = eig_factors(&KronOperator::new(vec![DenseMatrix::identity(3)]).unwrap(), 0.0).unwrap();
        assert_eq!(e.values[0], vec![1.0; 3]);
        let e = eig_factors(&KronOperator::new(vec![DenseMatrix::from_diag(&[4., 1.])]).unwrap(), 0.0).unwrap();
        assert_eq!(e.values[0], vec![4.0, 1.0]);
        let u = &e.vectors[0];
        assert_eq!(u.get(0, 0).abs(), 1.0);
        assert_eq!(u.get(1, 1).abs(), 1.0);
    }

    #[test]
    fn eig_rejects_asymmetric_factor() {
        let a = DenseMatrix::new(2, 2, vec![1., 0.5, 0.0, 1.]).unwrap();
        let op = KronOperator::new(vec![DenseMatrix::identity(2), a]).unwrap();
        let err = eig_factors(&op, 0.0).unwrap_err();
        assert!(err.to_string().contains("factor 1"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn inverse_apply_identity_halves() {
        let op = KronOperator::new(vec![DenseMatrix::identity(2), DenseMatrix::identity(3)]).unwrap();
        let e = eig_factors(&op, 0.0).unwrap();
        let v = FieldTensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r = inverse_apply(&e, 1.0, &v).unwrap();
        for (a, b) in r.values().iter().zip(v.values()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
        assert!(inverse_apply(&e, 0.0, &v).is_err());
    }

    #[test]
    fn logdet_closed_forms() {
        let op = KronOperator::new(vec![DenseMatrix::identity(2), DenseMatrix::identity(3)]).unwrap();
        let e = eig_factors(&op, 0.0).unwrap();
        assert!((logdet_from_eigs(&e, 1.0).unwrap() - 6.0 * 2f64.ln()).abs() < 1e-14);
        let op = KronOperator::new(vec![DenseMatrix::from_diag(&[2., 3.]), DenseMatrix::from_diag(&[4.])]).unwrap();
        let e = eig_factors(&op, 0.0).unwrap();
        let expect = 8.5f64.ln() + 12.5f64.ln();
        assert!((logdet_from_eigs(&e, 0.5).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn logdet_reports_negative_eigenvalue() {
        let op = KronOperator::new(vec![DenseMatrix::from_diag(&[1., -2.])]).unwrap();
        let e = eig_factors(&op, 0.0).unwrap();
        let err = logdet_from_eigs(&e, 0.5).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("-2"));
    }

    #[test]
    fn kron_diag_examples() {
        let op = KronOperator::new(vec![DenseMatrix::identity(2), DenseMatrix::identity(2)]).unwrap();
        assert_eq!(kron_diag(&op).unwrap().values(), &[1.0; 4]);
        let op = KronOperator::new(vec![DenseMatrix::from_diag(&[1., 2.]), DenseMatrix::from_diag(&[3., 5.])]).unwrap();
        assert_eq!(kron_diag(&op).unwrap().values(), &[3., 5., 6., 10.]);
        let op = KronOperator::new(vec![DenseMatrix::zeros(2, 3)]).unwrap();
        assert!(kron_diag(&op).is_err());
    }

    #[test]
    fn row_sq_single_point_counts_training_points() {
        // One test point whose cross-covariance row is all ones over 2×3 points.
        let cross = KronOperator::new(vec![DenseMatrix::new(1, 2, vec![1., 1.]).unwrap(), DenseMatrix::new(1, 3, vec![1.; 3]).unwrap()]).unwrap();
        let e = eig_factors(&KronOperator::new(vec![DenseMatrix::identity(2), DenseMatrix::identity(3)]).unwrap(), 0.0).unwrap();
        let w = FieldTensor::filled(vec![2, 3], 1.0);
        let r = row_sq_project(&cross, RowSqWeights::Eig { eig: &e, weights: &w }).unwrap();
        assert!((r.values()[0] - 6.0).abs() < 1e-14);
        let m = row_sq_project(&cross, RowSqWeights::Mask(&w)).unwrap();
        assert!((m.values()[0] - 6.0).abs() < 1e-14);
    }

    #[test]
    fn size_one_factor_is_scalar() {
        let op = KronOperator::new(vec![DenseMatrix::from_diag(&[3.0]), DenseMatrix::identity(2)]).unwrap();
        let v = FieldTensor::new(vec![1, 2], vec![1., 2.]).unwrap();
        assert_eq!(kron_matvec(&op, &v).unwrap().values(), &[3., 6.]);
    }
}
