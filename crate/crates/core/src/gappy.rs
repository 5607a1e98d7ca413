//! Gappy lattices: some spatial points carry no observation. Pseudovalues at
//! the gaps make the full-lattice solve reproduce the regular-only GP
//! exactly, so all Kronecker machinery still applies.
//!
//! Selections W (regular) and V (gaps) are index lists over the full training
//! vector; they are never materialized.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, num_err, val_err, KgpError, Result};
use crate::grid::{
    clamp_variance, fit_from_eig, nlml_from_eig, predict_mean, predict_var, prior_diag, FittedModel, ProductGrid,
    DEFAULT_JITTER, LN_2PI,
};
use crate::kernels::{cross_covariance, product_covariance, ProductKernelSpec};
use crate::kronalg::{eig_factors, inverse_apply, row_sq_project, sum_ln, EigFactors, FieldTensor, KronOperator, RowSqWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct GappyMask {
    shape: Vec<usize>,
    regular: Vec<usize>,
    gaps: Vec<usize>,
}

#[derive(Deserialize)]
struct RawMask {
    shape: Vec<usize>,
    regular: Vec<usize>,
    gaps: Vec<usize>,
}

impl TryFrom<RawMask> for GappyMask {
    type Error = String;
    fn try_from(raw: RawMask) -> std::result::Result<Self, String> {
        let m: usize = raw.shape.iter().product();
        let mut flags = vec![None; m];
        let tagged = raw.regular.iter().map(|&i| (i, true)).chain(raw.gaps.iter().map(|&i| (i, false)));
        for (i, r) in tagged {
            if i >= m || flags[i].is_some() {
                return Err(format!("mask index {i} out of range or repeated"));
            }
            flags[i] = Some(r);
        }
        if flags.iter().any(|f| f.is_none()) {
            return Err("mask does not cover the lattice".into());
        }
        let flags: Vec<bool> = flags.into_iter().map(|f| f.unwrap()).collect();
        GappyMask::from_flags(raw.shape, &flags).map_err(|e| e.to_string())
    }
}

impl GappyMask {
    /// `flags[s]` is true when spatial point s is regular.
    pub fn from_flags(shape: Vec<usize>, flags: &[bool]) -> Result<Self> {
        let m: usize = shape.iter().product();
        if flags.len() != m {
            return dim_err(format!("mask has {} flags for a lattice of {m} points", flags.len()));
        }
        let regular: Vec<usize> = (0..m).filter(|&i| flags[i]).collect();
        let gaps: Vec<usize> = (0..m).filter(|&i| !flags[i]).collect();
        if regular.is_empty() {
            return val_err("mask has no regular points");
        }
        Ok(Self { shape, regular, gaps })
    }

    pub fn all_regular(shape: Vec<usize>) -> Self {
        let m: usize = shape.iter().product();
        Self { shape, regular: (0..m).collect(), gaps: Vec::new() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn regular(&self) -> &[usize] {
        &self.regular
    }

    pub fn gaps(&self) -> &[usize] {
        &self.gaps
    }

    pub fn spatial_size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.spatial_size()];
        for &i in &self.regular {
            f[i] = true;
        }
        f
    }
}

/// W and V as sorted index lists over the full (N, M, N_t) training vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedIndices {
    pub regular: Vec<usize>,
    pub gaps: Vec<usize>,
    pub len: usize,
}

/// Lifts spatial selections to index = (p·M + s)·N_t + t.
pub fn lift_mask(mask: &GappyMask, n: usize, nt: usize) -> LiftedIndices {
    let m = mask.spatial_size();
    let flags = mask.flags();
    let mut regular = Vec::with_capacity(n * mask.regular.len() * nt);
    let mut gaps = Vec::with_capacity(n * mask.gaps.len() * nt);
    for p in 0..n {
        for (s, &f) in flags.iter().enumerate() {
            let base = (p * m + s) * nt;
            let dst = if f { &mut regular } else { &mut gaps };
            dst.extend(base..base + nt);
        }
    }
    LiftedIndices { regular, gaps, len: n * m * nt }
}

pub fn gather(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

pub fn scatter(vals: &[f64], idx: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&i, &v) in idx.iter().zip(vals) {
        out[i] = v;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgSettings {
    #[serde(default = "default_cg_tol")]
    pub tol: f64,
    #[serde(default = "default_cg_maxiter")]
    pub maxiter: usize,
}

fn default_cg_tol() -> f64 {
    1e-5
}

fn default_cg_maxiter() -> usize {
    2000
}

impl Default for CgSettings {
    fn default() -> Self {
        Self { tol: default_cg_tol(), maxiter: default_cg_maxiter() }
    }
}

#[derive(Clone, Debug)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// ‖b − Ax‖ / ‖b‖.
    pub residual: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unpreconditioned CG on an SPD operator, stopping at relative residual `tol`.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    maxiter: usize,
) -> Result<CgResult> {
    let n = b.len();
    let bn = norm(b);
    if n == 0 || bn == 0.0 {
        return Ok(CgResult { x: vec![0.0; n], iterations: 0, residual: 0.0 });
    }
    let mut x = match x0 {
        Some(x0) if x0.len() == n => x0.to_vec(),
        _ => vec![0.0; n],
    };
    let ax = apply(&x)?;
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut rel = norm(&r) / bn;
    if rel <= tol {
        return Ok(CgResult { x, iterations: 0, residual: rel });
    }
    let mut p = r.clone();
    let mut rr = dotv(&r, &r);
    let mut best = rel;
    for it in 1..=maxiter {
        let ap = apply(&p)?;
        let pap = dotv(&p, &ap);
        if !(pap > 0.0) {
            return num_err(format!("CG operator not positive definite (pᵀAp = {pap:.3e})"));
        }
        let a = rr / pap;
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * ap[i];
        }
        let rr_new = dotv(&r, &r);
        rel = rr_new.sqrt() / bn;
        best = best.min(rel);
        if rel <= tol {
            return Ok(CgResult { x, iterations: it, residual: rel });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(KgpError::CgNonConvergence { iterations: maxiter, best_residual: best })
}

#[derive(Clone, Debug)]
pub struct PseudoValueSolution {
    pub y_g: Vec<f64>,
    pub cg_iterations: usize,
    pub residual: f64,
}

/// Solves (V K_y⁻¹ Vᵀ) y_g = −V K_y⁻¹ Wᵀ y_r with Kronecker-accelerated CG.
pub fn solve_pseudovalues_eig(
    eig: &EigFactors,
    sigma2: f64,
    lifted: &LiftedIndices,
    y_r: &[f64],
    cg: CgSettings,
    warm: Option<&[f64]>,
) -> Result<PseudoValueSolution> {
    if y_r.len() != lifted.regular.len() {
        return dim_err(format!("{} regular targets for {} regular lattice entries", y_r.len(), lifted.regular.len()));
    }
    if lifted.len != eig.len() {
        return dim_err("mask lift does not match the lattice size");
    }
    if lifted.gaps.is_empty() {
        return Ok(PseudoValueSolution { y_g: Vec::new(), cg_iterations: 0, residual: 0.0 });
    }
    let shape = eig.shape();
    let solve = |full: Vec<f64>| -> Result<Vec<f64>> {
        Ok(inverse_apply(eig, sigma2, &FieldTensor::new(shape.clone(), full)?)?.into_values())
    };
    let rhs = solve(scatter(y_r, &lifted.regular, lifted.len))?;
    let b: Vec<f64> = lifted.gaps.iter().map(|&i| -rhs[i]).collect();
    let op = |x: &[f64]| -> Result<Vec<f64>> { Ok(gather(&solve(scatter(x, &lifted.gaps, lifted.len))?, &lifted.gaps)) };
    let res = conjugate_gradient(op, &b, warm, cg.tol, cg.maxiter)?;
    Ok(PseudoValueSolution { y_g: res.x, cg_iterations: res.iterations, residual: res.residual })
}

pub fn solve_pseudovalues(
    spec: &ProductKernelSpec,
    grid: &ProductGrid,
    mask: &GappyMask,
    y_r: &[f64],
    sigma2: f64,
    cg_tol: f64,
    cg_maxiter: usize,
) -> Result<PseudoValueSolution> {
    check_mask(grid, mask)?;
    let eig = eig_factors(&product_covariance(spec, grid)?, DEFAULT_JITTER)?;
    let lifted = lift_mask(mask, grid.n_params(), grid.time_size());
    solve_pseudovalues_eig(&eig, sigma2, &lifted, y_r, CgSettings { tol: cg_tol, maxiter: cg_maxiter }, None)
}

fn check_mask(grid: &ProductGrid, mask: &GappyMask) -> Result<()> {
    if mask.shape() != grid.spatial_shape().as_slice() {
        return dim_err(format!("mask shape {:?} does not match spatial lattice {:?}", mask.shape(), grid.spatial_shape()));
    }
    Ok(())
}

/// Wᵀy_r + Vᵀy_g.
pub fn reconstruct(lifted: &LiftedIndices, y_r: &[f64], y_g: &[f64], shape: Vec<usize>) -> Result<FieldTensor> {
    let mut y = scatter(y_r, &lifted.regular, lifted.len);
    for (&i, &v) in lifted.gaps.iter().zip(y_g) {
        y[i] = v;
    }
    FieldTensor::new(shape, y)
}

#[derive(Clone, Debug)]
pub struct GappyModel {
    /// Full-lattice model fit to the reconstructed targets.
    pub model: FittedModel,
    pub mask: GappyMask,
    pub lifted: LiftedIndices,
    pub solution: PseudoValueSolution,
}

impl GappyModel {
    /// W·α.
    pub fn alpha_regular(&self) -> Vec<f64> {
        gather(self.model.alpha.values(), &self.lifted.regular)
    }

    /// V·α; zero up to the CG residual.
    pub fn alpha_gaps(&self) -> Vec<f64> {
        gather(self.model.alpha.values(), &self.lifted.gaps)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn gappy_model_from_solution(
    spec: &ProductKernelSpec,
    grid: &ProductGrid,
    k: &KronOperator,
    eig: EigFactors,
    mask: &GappyMask,
    y_r: &[f64],
    solution: PseudoValueSolution,
    sigma2: f64,
    jitter: f64,
    offset: f64,
) -> Result<GappyModel> {
    let lifted = lift_mask(mask, grid.n_params(), grid.time_size());
    let y = reconstruct(&lifted, y_r, &solution.y_g, grid.shape())?;
    let model = fit_from_eig(spec, grid, k, eig, y, sigma2, jitter, offset)?;
    Ok(GappyModel { model, mask: mask.clone(), lifted, solution })
}

pub fn fit_gappy_with(
    spec: &ProductKernelSpec,
    grid: &ProductGrid,
    mask: &GappyMask,
    y_r: &[f64],
    sigma2: f64,
    cg: CgSettings,
    jitter: f64,
    offset: f64,
) -> Result<GappyModel> {
    check_mask(grid, mask)?;
    let k = product_covariance(spec, grid)?;
    let eig = eig_factors(&k, jitter)?;
    let lifted = lift_mask(mask, grid.n_params(), grid.time_size());
    let sol = solve_pseudovalues_eig(&eig, sigma2, &lifted, y_r, cg, None)?;
    gappy_model_from_solution(spec, grid, &k, eig, mask, y_r, sol, sigma2, jitter, offset)
}

pub fn fit_gappy(spec: &ProductKernelSpec, grid: &ProductGrid, mask: &GappyMask, y_r: &[f64], sigma2: f64, cg: CgSettings) -> Result<GappyModel> {
    fit_gappy_with(spec, grid, mask, y_r, sigma2, cg, DEFAULT_JITTER, 0.0)
}

#[derive(Clone, Debug)]
pub struct GappyNlml {
    pub value: f64,
    /// y_rᵀ(K_{Z_r}+σ²I)⁻¹y_r, exact up to CG tolerance.
    pub quad: f64,
    pub logdet: f64,
    /// True when `logdet` is the Nyström approximation rather than exact.
    pub logdet_approximate: bool,
    pub n_obs: usize,
    pub solution: PseudoValueSolution,
}

/// Σ_{i<k} log(ratio·λ_i + σ²) over the k largest eigenvalues of K_Z.
pub fn nystrom_logdet(eig: &EigFactors, ratio: f64, k: usize, sigma2: f64) -> f64 {
    let lam = eig.sorted_eigenvalues();
    sum_ln(lam[..k.min(lam.len())].iter().map(|l| ratio * l + sigma2))
}

/// (upper, lower) bounds on log|K_{Z_r}+σ²I| from eigenvalue interlacing.
pub fn interlacing_logdet_bounds(eig: &EigFactors, n_obs: usize, sigma2: f64) -> (f64, f64) {
    let lam = eig.sorted_eigenvalues();
    let ng = lam.len() - n_obs;
    let upper = sum_ln(lam[..n_obs].iter().map(|l| l + sigma2));
    let lower = sum_ln(lam[ng..].iter().map(|l| l + sigma2));
    (upper, lower)
}

pub fn gappy_nlml_from_eig(
    eig: &EigFactors,
    mask: &GappyMask,
    lifted: &LiftedIndices,
    y_r: &[f64],
    sigma2: f64,
    cg: CgSettings,
    warm: Option<&[f64]>,
) -> Result<GappyNlml> {
    let shape = eig.shape();
    let n_obs = lifted.regular.len();
    if lifted.gaps.is_empty() {
        let y = FieldTensor::new(shape, y_r.to_vec())?;
        let value = nlml_from_eig(eig, &y, sigma2)?;
        let logdet = crate::kronalg::logdet_from_eigs(eig, sigma2)?;
        let quad = 2.0 * value - logdet - n_obs as f64 * LN_2PI;
        let solution = PseudoValueSolution { y_g: Vec::new(), cg_iterations: 0, residual: 0.0 };
        return Ok(GappyNlml { value, quad, logdet, logdet_approximate: false, n_obs, solution });
    }
    let solution = solve_pseudovalues_eig(eig, sigma2, lifted, y_r, cg, warm)?;
    let y = reconstruct(lifted, y_r, &solution.y_g, shape)?;
    let alpha = inverse_apply(eig, sigma2, &y)?;
    let quad = y.dot(&alpha);
    let ratio = mask.regular.len() as f64 / mask.spatial_size() as f64;
    let logdet = nystrom_logdet(eig, ratio, n_obs, sigma2);
    let value = 0.5 * quad + 0.5 * logdet + 0.5 * n_obs as f64 * LN_2PI;
    if !value.is_finite() {
        return num_err(format!("non-finite gappy NLML (quadratic {quad}, logdet {logdet})"));
    }
    Ok(GappyNlml { value, quad, logdet, logdet_approximate: true, n_obs, solution })
}

/// Gappy NLML: exact quadratic term via pseudovalues, Nyström log-det.
pub fn gappy_nlml(
    spec: &ProductKernelSpec,
    grid: &ProductGrid,
    mask: &GappyMask,
    y_r: &[f64],
    sigma2: f64,
    cg: CgSettings,
) -> Result<GappyNlml> {
    check_mask(grid, mask)?;
    if !(sigma2 > 0.0) {
        return val_err(format!("noise variance must be positive, got {sigma2}"));
    }
    let eig = eig_factors(&product_covariance(spec, grid)?, DEFAULT_JITTER)?;
    let lifted = lift_mask(mask, grid.n_params(), grid.time_size());
    gappy_nlml_from_eig(&eig, mask, &lifted, y_r, sigma2, cg, None)
}

fn test_lift(test: &ProductGrid, test_mask: &GappyMask) -> Result<LiftedIndices> {
    check_mask(test, test_mask)?;
    Ok(lift_mask(test_mask, test.n_params(), test.time_size()))
}

/// Posterior mean at the regular test points, in lifted-index order.
pub fn gappy_predict_mean(model: &GappyModel, test: &ProductGrid, test_mask: &GappyMask) -> Result<Vec<f64>> {
    let lifted = test_lift(test, test_mask)?;
    let full = predict_mean(&model.model, test)?;
    Ok(gather(full.values(), &lifted.regular))
}

/// Elementwise (lower, upper) bounds on the regular-only posterior variance at
/// the regular test points.
pub fn gappy_predict_var_bounds(model: &GappyModel, test: &ProductGrid, test_mask: &GappyMask) -> Result<(Vec<f64>, Vec<f64>)> {
    let lifted = test_lift(test, test_mask)?;
    let lower = predict_var(&model.model, test)?.var;
    let m = &model.model;
    let cross = cross_covariance(&m.spec, &m.grid, test)?;
    let p_r = FieldTensor::new(m.grid.shape(), {
        let mut v = vec![0.0; model.lifted.len];
        for &i in &model.lifted.regular {
            v[i] = 1.0;
        }
        v
    })?;
    let rowsq = row_sq_project(&cross, RowSqWeights::Mask(&p_r))?;
    let denom = m.eig.max_eigenvalue() + m.sigma2;
    let mut upper = prior_diag(&m.spec, test)?;
    for (u, r) in upper.values_mut().iter_mut().zip(rowsq.values()) {
        *u -= r / denom;
    }
    let upper = clamp_variance(upper).var;
    Ok((gather(lower.values(), &lifted.regular), gather(upper.values(), &lifted.regular)))
}
