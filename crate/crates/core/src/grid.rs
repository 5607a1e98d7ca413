//! Gaussian process on a full rectilinear lattice: structured NLML, fit,
//! posterior mean and exact diagonal posterior variance.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, num_err, val_err, Result};
use crate::kernels::{cross_covariance, product_covariance, ProductKernelSpec};
use crate::kronalg::{
    eig_factors, inverse_apply, kron_diag, kron_matvec, logdet_from_eigs, row_sq_project, EigFactors, FieldTensor,
    KronOperator, RowSqWeights,
};
use crate::linalg::DenseMatrix;

/// Relative diagonal jitter added to every factor before decomposition.
pub const DEFAULT_JITTER: f64 = 1e-8;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisRole {
    Parameter,
    Spatial,
    Temporal,
}

impl AxisRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AxisRole::Parameter => "parameter",
            AxisRole::Spatial => "spatial",
            AxisRole::Temporal => "temporal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub role: AxisRole,
    /// nᵢ × qᵢ coordinates.
    pub points: DenseMatrix,
}

impl Axis {
    pub fn new(role: AxisRole, points: DenseMatrix) -> Self {
        Self { role, points }
    }

    /// One-dimensional axis.
    pub fn line(role: AxisRole, values: &[f64]) -> Self {
        Self { role, points: DenseMatrix::column(values) }
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    /// Per-coordinate max − min.
    pub fn ranges(&self) -> Vec<f64> {
        (0..self.points.cols())
            .map(|j| {
                let (lo, hi) = (0..self.points.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                    let v = self.points.get(i, j);
                    (lo.min(v), hi.max(v))
                });
                hi - lo
            })
            .collect()
    }
}

/// Ordered axes (parameter, spatial…, [temporal]) spanning a Cartesian lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct ProductGrid {
    axes: Vec<Axis>,
}

#[derive(Deserialize)]
struct RawGrid {
    axes: Vec<Axis>,
}

impl TryFrom<RawGrid> for ProductGrid {
    type Error = String;
    fn try_from(raw: RawGrid) -> std::result::Result<Self, String> {
        ProductGrid::new(raw.axes).map_err(|e| e.to_string())
    }
}

impl ProductGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.len() < 2 {
            return val_err("a grid needs a parameter axis and at least one spatial axis");
        }
        if axes[0].role != AxisRole::Parameter {
            return val_err("the first axis must be the parameter axis");
        }
        let n_param = axes.iter().filter(|a| a.role == AxisRole::Parameter).count();
        let n_time = axes.iter().filter(|a| a.role == AxisRole::Temporal).count();
        let n_space = axes.iter().filter(|a| a.role == AxisRole::Spatial).count();
        if n_param != 1 {
            return val_err(format!("exactly one parameter axis allowed, found {n_param}"));
        }
        if n_time > 1 {
            return val_err(format!("at most one temporal axis allowed, found {n_time}"));
        }
        if n_time == 1 && axes.last().map(|a| a.role) != Some(AxisRole::Temporal) {
            return val_err("the temporal axis must come last");
        }
        if n_space == 0 {
            return val_err("at least one spatial axis is required");
        }
        for (i, ax) in axes.iter().enumerate() {
            if ax.is_empty() || ax.points.cols() == 0 {
                return val_err(format!("axis {i} is empty"));
            }
            if ax.points.data().iter().any(|v| !v.is_finite()) {
                return val_err(format!("axis {i} has non-finite coordinates"));
            }
            let mut rows: Vec<&[f64]> = (0..ax.len()).map(|r| ax.points.row(r)).collect();
            rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if rows.windows(2).any(|w| w[0] == w[1]) {
                return val_err(format!("axis {i} has duplicate points"));
            }
        }
        Ok(Self { axes })
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_params(&self) -> usize {
        self.axes[0].len()
    }

    pub fn has_time(&self) -> bool {
        self.axes.last().map(|a| a.role) == Some(AxisRole::Temporal)
    }

    pub fn spatial_axes(&self) -> &[Axis] {
        let end = if self.has_time() { self.axes.len() - 1 } else { self.axes.len() };
        &self.axes[1..end]
    }

    pub fn spatial_shape(&self) -> Vec<usize> {
        self.spatial_axes().iter().map(|a| a.len()).collect()
    }

    /// M: number of spatial lattice points.
    pub fn spatial_size(&self) -> usize {
        self.spatial_axes().iter().map(|a| a.len()).product()
    }

    /// N_t (1 without a temporal axis).
    pub fn time_size(&self) -> usize {
        if self.has_time() {
            self.axes.last().unwrap().len()
        } else {
            1
        }
    }

    /// Coordinate count per axis.
    pub fn factor_dims(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.points.cols()).collect()
    }

    pub fn roles(&self) -> Vec<AxisRole> {
        self.axes.iter().map(|a| a.role).collect()
    }

    /// Same lattice with a different parameter axis.
    pub fn with_param_points(&self, points: DenseMatrix) -> Result<Self> {
        let mut axes = self.axes.clone();
        axes[0] = Axis::new(AxisRole::Parameter, points);
        Self::new(axes)
    }

    /// Every lattice point as a row (concatenated axis coordinates), in
    /// layout order.
    pub fn lattice_points(&self) -> DenseMatrix {
        let shape = self.shape();
        let dims = self.factor_dims();
        let total: usize = dims.iter().sum();
        let n = self.len();
        let mut data = Vec::with_capacity(n * total);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            for (k, ax) in self.axes.iter().enumerate() {
                data.extend_from_slice(ax.points.row(idx[k]));
            }
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        DenseMatrix::new(n, total, data).expect("lattice size")
    }
}

/// Hyperparameters plus cached factor eigendecompositions and representer
/// weights α = (K_Z + σ²I)⁻¹ y.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub spec: ProductKernelSpec,
    pub grid: ProductGrid,
    pub sigma2: f64,
    pub jitter: f64,
    pub eig: EigFactors,
    pub alpha: FieldTensor,
    /// Targets the model was fit to (already centered).
    pub y: FieldTensor,
    /// Added back to every predicted mean.
    pub offset: f64,
    /// ‖(K_Z+σ²I)α − y‖ / ‖y‖.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct VariancePrediction {
    pub var: FieldTensor,
    /// Entries below zero before clamping.
    pub clamped: usize,
    pub min_raw: f64,
}

fn check_y(grid: &ProductGrid, y: &FieldTensor) -> Result<()> {
    if y.shape() != grid.shape().as_slice() {
        return dim_err(format!("targets have shape {:?}, grid is {:?}", y.shape(), grid.shape()));
    }
    if y.values().iter().any(|v| !v.is_finite()) {
        return val_err("targets contain non-finite values");
    }
    Ok(())
}

/// NLML from precomputed eigenfactors.
pub fn nlml_from_eig(eig: &EigFactors, y: &FieldTensor, sigma2: f64) -> Result<f64> {
    let w = eig.forward(y)?;
    let quad = quad_from_rotated(eig, &w, sigma2);
    let logdet = logdet_from_eigs(eig, sigma2)?;
    let v = 0.5 * quad + 0.5 * logdet + 0.5 * y.len() as f64 * LN_2PI;
    if !v.is_finite() {
        return num_err(format!("non-finite NLML (quadratic {quad}, logdet {logdet})"));
    }
    Ok(v)
}

/// Σ w_i² / (λ_i + σ²) for w = Uᵀy.
pub(crate) fn quad_from_rotated(eig: &EigFactors, w: &FieldTensor, sigma2: f64) -> f64 {
    let lam = eig.eigenvalue_tensor();
    w.values().iter().zip(lam.values()).map(|(wi, li)| wi * wi / (li + sigma2)).sum()
}

pub fn grid_nlml_with(spec: &ProductKernelSpec, grid: &ProductGrid, y: &FieldTensor, sigma2: f64, jitter: f64) -> Result<f64> {
    check_y(grid, y)?;
    if !(sigma2 > 0.0) {
        return val_err(format!("noise variance must be positive, got {sigma2}"));
    }
    let k = product_covariance(spec, grid)?;
    let eig = eig_factors(&k, jitter)?;
    nlml_from_eig(&eig, y, sigma2)
}

/// ½yᵀK_y⁻¹y + ½log|K_y| + (n/2)log 2π with K_y = K_Z + σ²I.
pub fn grid_nlml(spec: &ProductKernelSpec, grid: &ProductGrid, y: &FieldTensor, sigma2: f64) -> Result<f64> {
    grid_nlml_with(spec, grid, y, sigma2, DEFAULT_JITTER)
}

/// Factors with their decomposition jitter added back, i.e. the operator the
/// eigenfactors actually diagonalize.
pub fn jittered(k: &KronOperator, eig: &EigFactors) -> Result<KronOperator> {
    let mut factors = k.factors().to_vec();
    for (f, &e) in factors.iter_mut().zip(&eig.jitters) {
        f.add_diag(e);
    }
    KronOperator::new(factors)
}

pub fn fit_from_eig(
    spec: &ProductKernelSpec,
    grid: &ProductGrid,
    k: &KronOperator,
    eig: EigFactors,
    y: FieldTensor,
    sigma2: f64,
    jitter: f64,
    offset: f64,
) -> Result<FittedModel> {
    let alpha = inverse_apply(&eig, sigma2, &y)?;
    if alpha.values().iter().any(|v| !v.is_finite()) {
        return num_err("representer weights are not finite");
    }
    let mut r = kron_matvec(&jittered(k, &eig)?, &alpha)?;
    for (ri, (ai, yi)) in r.values_mut().iter_mut().zip(alpha.values().iter().zip(y.values())) {
        *ri += sigma2 * ai - yi;
    }
    let ny = y.norm();
    let residual = if ny > 0.0 { r.norm() / ny } else { r.norm() };
    Ok(FittedModel { spec: spec.clone(), grid: grid.clone(), sigma2, jitter, eig, alpha, y, offset, residual })
}

pub fn fit_with(
    spec: &ProductKernelSpec,
    grid: &ProductGrid,
    y: &FieldTensor,
    sigma2: f64,
    jitter: f64,
    offset: f64,
) -> Result<FittedModel> {
    check_y(grid, y)?;
    if !(sigma2 > 0.0) {
        return val_err(format!("noise variance must be positive, got {sigma2}"));
    }
    let k = product_covariance(spec, grid)?;
    let eig = eig_factors(&k, jitter)?;
    fit_from_eig(spec, grid, &k, eig, y.clone(), sigma2, jitter, offset)
}

/// Fits with the default jitter and no offset (targets used as given).
pub fn fit(spec: &ProductKernelSpec, grid: &ProductGrid, y: &FieldTensor, sigma2: f64) -> Result<FittedModel> {
    fit_with(spec, grid, y, sigma2, DEFAULT_JITTER, 0.0)
}

/// K_{Z*,Z} α (+ offset) over an arbitrary rectilinear test lattice.
pub fn predict_mean(model: &FittedModel, test: &ProductGrid) -> Result<FieldTensor> {
    let cross = cross_covariance(&model.spec, &model.grid, test)?;
    let mut m = kron_matvec(&cross, &model.alpha)?;
    if model.offset != 0.0 {
        m.values_mut().iter_mut().for_each(|v| *v += model.offset);
    }
    Ok(m)
}

/// diag(K_{**}) as a Kronecker diagonal of per-factor prior variances.
pub fn prior_diag(spec: &ProductKernelSpec, test: &ProductGrid) -> Result<FieldTensor> {
    let factors = test
        .axes()
        .iter()
        .zip(&spec.factors)
        .map(|(ax, f)| {
            let feats = f.map.forward(&ax.points)?;
            let d: Vec<f64> = (0..feats.rows()).map(|i| f.base.eval(feats.row(i), feats.row(i))).collect();
            Ok(DenseMatrix::from_diag(&d))
        })
        .collect::<Result<Vec<_>>>()?;
    kron_diag(&KronOperator::new(factors)?)
}

/// Raw (unclamped) diag(K_{**}) − diag(K_* K_y⁻¹ K_*ᵀ).
pub fn predict_var_raw(model: &FittedModel, test: &ProductGrid) -> Result<FieldTensor> {
    let cross = cross_covariance(&model.spec, &model.grid, test)?;
    let weights = model.eig.eigenvalue_tensor().map(|l| 1.0 / (l + model.sigma2));
    let rowsq = row_sq_project(&cross, RowSqWeights::Eig { eig: &model.eig, weights: &weights })?;
    let mut var = prior_diag(&model.spec, test)?;
    for (v, r) in var.values_mut().iter_mut().zip(rowsq.values()) {
        *v -= r;
    }
    Ok(var)
}

pub fn clamp_variance(mut var: FieldTensor) -> VariancePrediction {
    let mut clamped = 0;
    let mut min_raw = f64::INFINITY;
    for v in var.values_mut() {
        min_raw = min_raw.min(*v);
        if *v < 0.0 {
            *v = 0.0;
            clamped += 1;
        }
    }
    VariancePrediction { var, clamped, min_raw }
}

/// Exact diagonal posterior variance, clamped at zero.
pub fn predict_var(model: &FittedModel, test: &ProductGrid) -> Result<VariancePrediction> {
    Ok(clamp_variance(predict_var_raw(model, test)?))
}
