//! Base stationary kernels, small feed-forward feature maps and the deep
//! product kernel assembled per lattice axis.
//!
//! Squared exponential uses `exp(−‖(u−u′)/ℓ‖²)` with no factor ½.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, num_err, val_err, Result};
use crate::grid::ProductGrid;
use crate::kronalg::KronOperator;
use crate::linalg::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern52,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseKernel {
    pub family: KernelFamily,
    pub log_lengthscales: Vec<f64>,
    pub log_outputscale: f64,
}

impl BaseKernel {
    pub fn new(family: KernelFamily, lengthscales: &[f64], outputscale: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return val_err("kernel needs at least one lengthscale");
        }
        if let Some(l) = lengthscales.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return val_err(format!("lengthscales must be positive, got {l}"));
        }
        if !(outputscale > 0.0) || !outputscale.is_finite() {
            return val_err(format!("outputscale must be positive, got {outputscale}"));
        }
        Ok(Self {
            family,
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_outputscale: outputscale.ln(),
        })
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.exp()
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    /// Kernel value for the scaled squared distance r² = ‖(u−u′)/ℓ‖².
    #[inline]
    pub fn eval_r2(&self, r2: f64, outputscale: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => outputscale * (-r2).exp(),
            KernelFamily::Matern52 => {
                let r = r2.sqrt();
                let s5r = 5f64.sqrt() * r;
                outputscale * (1.0 + s5r + 5.0 * r2 / 3.0) * (-s5r).exp()
            }
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let inv: Vec<f64> = self.log_lengthscales.iter().map(|l| (-l).exp()).collect();
        let r2 = scaled_sqdist(a, b, &inv);
        self.eval_r2(r2, self.outputscale())
    }
}

#[inline]
fn scaled_sqdist(a: &[f64], b: &[f64], inv_ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), w) in a.iter().zip(b).zip(inv_ls) {
        let d = (x - y) * w;
        s += d * d;
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// out × in
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Per-dimension affine rescaling of `[lo, hi]` onto `[−1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputScaling {
    pub fn from_points(points: &DenseMatrix) -> Self {
        let q = points.cols();
        let mut lo = vec![f64::INFINITY; q];
        let mut hi = vec![f64::NEG_INFINITY; q];
        for i in 0..points.rows() {
            for (j, &v) in points.row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        Self { lo, hi }
    }

    #[inline]
    fn apply(&self, j: usize, v: f64) -> f64 {
        let w = self.hi[j] - self.lo[j];
        if w > 0.0 {
            2.0 * (v - self.lo[j]) / w - 1.0
        } else {
            0.0
        }
    }
}

/// Feed-forward map; the activation acts on hidden layers, the last layer is
/// affine. Zero layers is the identity map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    pub activation: Activation,
    #[serde(default)]
    pub scaling: Option<InputScaling>,
}

impl FeatureMap {
    pub fn identity(dim: usize) -> Self {
        Self { input_dim: dim, layers: Vec::new(), activation: Activation::Identity, scaling: None }
    }

    pub fn new(input_dim: usize, layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        let mut prev = input_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weights.cols() != prev || l.bias.len() != l.weights.rows() {
                return dim_err(format!("layer {i} has inconsistent shape"));
            }
            prev = l.weights.rows();
        }
        if prev == 0 {
            return val_err("feature map output dimension must be at least 1");
        }
        if layers.iter().any(|l| l.weights.data().iter().chain(&l.bias).any(|v| !v.is_finite())) {
            return val_err("feature map weights must be finite");
        }
        Ok(Self { input_dim, layers, activation, scaling: None })
    }

    /// Xavier-uniform weights in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn xavier(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return val_err("a network needs at least input and output sizes");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fin, fout) = (w[0], w[1]);
                let a = (6.0 / (fin + fout) as f64).sqrt();
                let weights = DenseMatrix::from_fn(fout, fin, |_, _| rng.random_range(-a..a));
                Layer { weights, bias: vec![0.0; fout] }
            })
            .collect();
        Self::new(sizes[0], layers, activation)
    }

    pub fn with_scaling(mut self, scaling: InputScaling) -> Self {
        self.scaling = Some(scaling);
        self
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weights.rows())
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len() + l.bias.len()).sum()
    }

    /// Weights then bias, layer by layer.
    pub fn weights_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_weights());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_weights_flat(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.num_weights() {
            return dim_err(format!("feature map has {} weights, got {}", self.num_weights(), w.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weights.data().len();
            l.weights.data_mut().copy_from_slice(&w[off..off + n]);
            off += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&w[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn forward(&self, points: &DenseMatrix) -> Result<DenseMatrix> {
        if points.cols() != self.input_dim {
            return dim_err(format!("feature map expects {} inputs, got {}", self.input_dim, points.cols()));
        }
        if self.layers.is_empty() {
            return Ok(points.clone());
        }
        let n = points.rows();
        let mut h = match &self.scaling {
            Some(s) => DenseMatrix::from_fn(n, self.input_dim, |i, j| s.apply(j, points.get(i, j))),
            None => points.clone(),
        };
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let (out, inp) = (l.weights.rows(), l.weights.cols());
            let mut next = DenseMatrix::zeros(n, out);
            for i in 0..n {
                let hi = h.row(i);
                for o in 0..out {
                    let w = &l.weights.data()[o * inp..(o + 1) * inp];
                    let mut s = l.bias[o];
                    for (a, b) in w.iter().zip(hi) {
                        s += a * b;
                    }
                    next.set(i, o, if li < last { self.activation.apply(s) } else { s });
                }
            }
            h = next;
        }
        if h.data().iter().any(|v| !v.is_finite()) {
            return num_err("feature map produced non-finite output (weights diverged?)");
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorKernel {
    pub map: FeatureMap,
    pub base: BaseKernel,
}

impl FactorKernel {
    pub fn new(map: FeatureMap, base: BaseKernel) -> Result<Self> {
        if map.output_dim() != base.dim() {
            return dim_err(format!(
                "feature map outputs {} dimensions but the base kernel has {} lengthscales",
                map.output_dim(),
                base.dim()
            ));
        }
        Ok(Self { map, base })
    }

    /// Stationary kernel on raw inputs.
    pub fn stationary(family: KernelFamily, lengthscales: &[f64], outputscale: f64) -> Result<Self> {
        Self::new(FeatureMap::identity(lengthscales.len()), BaseKernel::new(family, lengthscales, outputscale)?)
    }

    pub fn input_dim(&self) -> usize {
        self.map.input_dim
    }

    /// Kernel matrix between latent feature rows.
    pub fn gram_latent(&self, fa: &DenseMatrix, fb: &DenseMatrix, symmetric: bool) -> DenseMatrix {
        let inv: Vec<f64> = self.base.log_lengthscales.iter().map(|l| (-l).exp()).collect();
        let os = self.base.outputscale();
        let (n, m) = (fa.rows(), fb.rows());
        if symmetric {
            let mut k = DenseMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = self.base.eval_r2(scaled_sqdist(fa.row(i), fa.row(j), &inv), os);
                    k.set(i, j, v);
                    k.set(j, i, v);
                }
            }
            k
        } else {
            DenseMatrix::from_fn(n, m, |i, j| self.base.eval_r2(scaled_sqdist(fa.row(i), fb.row(j), &inv), os))
        }
    }

    /// Pointwise evaluation on raw inputs.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let fa = self.map.forward(&DenseMatrix::new(1, a.len(), a.to_vec())?)?;
        let fb = self.map.forward(&DenseMatrix::new(1, b.len(), b.to_vec())?)?;
        Ok(self.base.eval(fa.row(0), fb.row(0)))
    }
}

/// `k(G(aᵢ), G(bⱼ))`; exactly symmetric when `a` and `b` are equal.
pub fn gram(fk: &FactorKernel, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let fa = fk.map.forward(a)?;
    if a == b {
        return Ok(fk.gram_latent(&fa, &fa, true));
    }
    let fb = fk.map.forward(b)?;
    Ok(fk.gram_latent(&fa, &fb, false))
}

/// Deep product kernel: one factor per lattice axis; only factor 0 (the
/// parameter axis) carries a free outputscale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductKernelSpec {
    pub factors: Vec<FactorKernel>,
}

impl ProductKernelSpec {
    pub fn new(factors: Vec<FactorKernel>) -> Result<Self> {
        let s = Self { factors };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return val_err("product kernel needs at least one factor");
        }
        for (i, f) in self.factors.iter().enumerate().skip(1) {
            if f.base.log_outputscale != 0.0 {
                return val_err(format!("factor {i} must have outputscale fixed at 1"));
            }
        }
        for (i, f) in self.factors.iter().enumerate() {
            if f.map.output_dim() != f.base.dim() {
                return dim_err(format!("factor {i}: map output and lengthscale count differ"));
            }
        }
        Ok(())
    }

    pub fn outputscale(&self) -> f64 {
        self.factors[0].base.outputscale()
    }

    /// Prior variance k(z, z): product of factor outputscales.
    pub fn prior_variance(&self) -> f64 {
        self.factors.iter().map(|f| f.base.outputscale()).product()
    }

    fn check_grid(&self, grid: &ProductGrid) -> Result<()> {
        if grid.axes().len() != self.factors.len() {
            return val_err(format!("grid has {} axes but the kernel has {} factors", grid.axes().len(), self.factors.len()));
        }
        for (i, (ax, f)) in grid.axes().iter().zip(&self.factors).enumerate() {
            if ax.points.cols() != f.input_dim() {
                return dim_err(format!("axis {i} has {} coordinates, factor {i} expects {}", ax.points.cols(), f.input_dim()));
            }
        }
        Ok(())
    }
}

pub fn product_covariance(spec: &ProductKernelSpec, grid: &ProductGrid) -> Result<KronOperator> {
    spec.check_grid(grid)?;
    let factors = grid
        .axes()
        .iter()
        .zip(&spec.factors)
        .map(|(ax, f)| gram(f, &ax.points, &ax.points))
        .collect::<Result<Vec<_>>>()?;
    KronOperator::new(factors)
}

/// `K_{Z*,Z}`: factor k is n*_k × n_k.
pub fn cross_covariance(spec: &ProductKernelSpec, train: &ProductGrid, test: &ProductGrid) -> Result<KronOperator> {
    spec.check_grid(train)?;
    spec.check_grid(test)?;
    let factors = test
        .axes()
        .iter()
        .zip(train.axes())
        .zip(&spec.factors)
        .map(|((te, tr), f)| gram(f, &te.points, &tr.points))
        .collect::<Result<Vec<_>>>()?;
    KronOperator::new(factors)
}
