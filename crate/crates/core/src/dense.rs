//! Brute-force dense GP used as the reference for every structured path.
//! Builds the full covariance pointwise and factors it with a plain Cholesky.

use crate::error::{dim_err, num_err, val_err, KgpError, Result};
use crate::grid::LN_2PI;
use crate::kernels::ProductKernelSpec;
use crate::linalg::DenseMatrix;
use crate::training::ParamVector;

pub const DEFAULT_DENSE_CAP: usize = 2000;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct DenseGP {
    /// n × Σ qₖ; columns grouped per kernel factor.
    pub z: DenseMatrix,
    pub y: Vec<f64>,
    pub spec: ProductKernelSpec,
    /// Input columns consumed by each factor.
    pub dims: Vec<usize>,
    pub sigma2: f64,
    /// Relative diagonal jitter per factor; reproduces the structured path.
    pub jitter: f64,
    pub cap: usize,
}

pub struct DensePrediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub clamped: usize,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]);
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

/// Lower Cholesky factor, row-major. Fails with the offending pivot.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return dim_err("cholesky needs a square matrix");
    }
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let s = a.get(j, j) - dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
        if !(s > 0.0) {
            return num_err(format!("cholesky failed at column {j}: pivot {s:.3e}"));
        }
        let d = s.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let (head, tail) = l.split_at_mut(i * n);
            let v = (a.get(i, j) - dot(&tail[..j], &head[j * n..j * n + j])) / d;
            tail[j] = v;
        }
    }
    DenseMatrix::new(n, n, l)
}

/// Solves L x = b in place.
pub fn forward_sub(l: &DenseMatrix, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let s = b[i] - dot(&l.row(i)[..i], &b[..i]);
        b[i] = s / l.get(i, i);
    }
}

/// Solves Lᵀ x = b in place.
pub fn backward_sub(l: &DenseMatrix, b: &mut [f64]) {
    let n = l.rows();
    for i in (0..n).rev() {
        let xi = b[i] / l.get(i, i);
        b[i] = xi;
        let row = &l.row(i)[..i];
        for (bk, lk) in b[..i].iter_mut().zip(row) {
            *bk -= lk * xi;
        }
    }
}

impl DenseGP {
    pub fn new(z: DenseMatrix, y: Vec<f64>, spec: ProductKernelSpec, dims: Vec<usize>, sigma2: f64, jitter: f64) -> Result<Self> {
        Self::new_capped(z, y, spec, dims, sigma2, jitter, DEFAULT_DENSE_CAP)
    }

    /// As [`DenseGP::new`] with an explicit point cap, checked once.
    pub fn new_capped(z: DenseMatrix, y: Vec<f64>, spec: ProductKernelSpec, dims: Vec<usize>, sigma2: f64, jitter: f64, cap: usize) -> Result<Self> {
        let gp = Self { z, y, spec, dims, sigma2, jitter, cap };
        gp.check()?;
        Ok(gp)
    }

    pub fn with_cap(mut self, cap: usize) -> Result<Self> {
        self.cap = cap;
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if self.z.rows() != self.y.len() {
            return dim_err(format!("{} inputs but {} targets", self.z.rows(), self.y.len()));
        }
        if self.z.rows() > self.cap {
            return val_err(format!("dense oracle refuses {} points (cap {})", self.z.rows(), self.cap));
        }
        if self.dims.len() != self.spec.factors.len() || self.dims.iter().sum::<usize>() != self.z.cols() {
            return dim_err("input column partition does not match the kernel factors");
        }
        if !(self.sigma2 >= 0.0) {
            return val_err(format!("noise variance must be non-negative, got {}", self.sigma2));
        }
        Ok(())
    }

    fn slices(&self, z: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        let mut off = 0;
        let mut out = Vec::with_capacity(self.dims.len());
        for &q in &self.dims {
            let cols = DenseMatrix::from_fn(z.rows(), q, |i, j| z.get(i, off + j));
            off += q;
            out.push(cols);
        }
        Ok(out)
    }

    fn features(&self, z: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        self.slices(z)?.iter().zip(&self.spec.factors).map(|(c, f)| f.map.forward(c)).collect()
    }

    /// Pointwise product-kernel covariance between two input sets. With
    /// `train_jitter`, each factor adds `jitter·k_f(a,a)` where its own
    /// coordinates coincide.
    pub fn covariance(&self, a: &DenseMatrix, b: &DenseMatrix, train_jitter: bool) -> Result<DenseMatrix> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let (ca, cb) = (self.slices(a)?, self.slices(b)?);
        let mut k = DenseMatrix::from_fn(a.rows(), b.rows(), |_, _| 1.0);
        for (f, fk) in self.spec.factors.iter().enumerate() {
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    let mut v = fk.base.eval(fa[f].row(i), fb[f].row(j));
                    if train_jitter && ca[f].row(i) == cb[f].row(j) {
                        v += self.jitter * fk.base.eval(fa[f].row(i), fa[f].row(i));
                    }
                    k.set(i, j, k.get(i, j) * v);
                }
            }
        }
        Ok(k)
    }

    pub fn k_y(&self) -> Result<DenseMatrix> {
        let mut k = self.covariance(&self.z, &self.z, true)?;
        k.add_diag(self.sigma2);
        Ok(k)
    }

    /// (Cholesky factor, α = K_y⁻¹ y).
    pub fn solve(&self) -> Result<(DenseMatrix, Vec<f64>)> {
        let l = cholesky(&self.k_y()?)?;
        let mut alpha = self.y.clone();
        forward_sub(&l, &mut alpha);
        backward_sub(&l, &mut alpha);
        Ok((l, alpha))
    }
}

/// ½yᵀK_y⁻¹y + ½log|K_y| + (n/2)log 2π via Cholesky.
pub fn dense_nlml(gp: &DenseGP) -> Result<f64> {
    let (l, alpha) = gp.solve()?;
    let quad: f64 = gp.y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let logdet: f64 = 2.0 * (0..l.rows()).map(|i| l.get(i, i).ln()).sum::<f64>();
    Ok(0.5 * quad + 0.5 * logdet + 0.5 * gp.y.len() as f64 * LN_2PI)
}

/// Posterior mean kᵀK_y⁻¹y and variance k(z*,z*) − kᵀK_y⁻¹k at each test row.
pub fn dense_predict(gp: &DenseGP, test: &DenseMatrix) -> Result<DensePrediction> {
    let (l, alpha) = gp.solve()?;
    let ks = gp.covariance(test, &gp.z, false)?;
    let kss = gp.covariance(test, test, false)?;
    let mut mean = Vec::with_capacity(test.rows());
    let mut var = Vec::with_capacity(test.rows());
    let mut clamped = 0;
    for i in 0..test.rows() {
        let row = ks.row(i);
        mean.push(row.iter().zip(&alpha).map(|(a, b)| a * b).sum());
        let mut v = row.to_vec();
        forward_sub(&l, &mut v);
        let mut s = kss.get(i, i) - v.iter().map(|x| x * x).sum::<f64>();
        if s < 0.0 {
            clamped += 1;
            s = 0.0;
        }
        var.push(s);
    }
    Ok(DensePrediction { mean, var, clamped })
}

/// Central differences of the dense NLML over the log-parameter vector θ.
pub fn dense_nlml_grad_fd(gp: &DenseGP, theta: &ParamVector) -> Result<Vec<f64>> {
    if theta.len() > gp.cap {
        return val_err(format!("{} parameters exceed the finite-difference cap {}", theta.len(), gp.cap));
    }
    let eval = |v: &[f64]| -> Result<f64> {
        let mut p = theta.clone();
        p.values.copy_from_slice(v);
        let (spec, sigma2) = p.unpack(&gp.spec)?;
        let mut g = gp.clone();
        g.spec = spec;
        g.sigma2 = sigma2;
        dense_nlml(&g)
    };
    let mut grad = Vec::with_capacity(theta.len());
    let mut v = theta.values.clone();
    for i in 0..theta.len() {
        let x = v[i];
        v[i] = x + FD_STEP;
        let fp = eval(&v)?;
        v[i] = x - FD_STEP;
        let fm = eval(&v)?;
        v[i] = x;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(KgpError::Numerical(format!("non-finite NLML when perturbing component {i}")));
        }
        grad.push((fp - fm) / (2.0 * FD_STEP));
    }
    Ok(grad)
}
