//! Self-check suites run by `kgp verify`. Each suite draws seeded random
//! instances, compares structured results against the dense oracle (or the
//! plain-matrix form of an identity) and reports one margin per check.
//!
//! A perturbation hook corrupts either the pseudovalue solve or a Kronecker
//! factor on the structured side only, so a healthy suite must then fail.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dense::{dense_nlml, dense_predict, DenseGP};
use crate::error::{val_err, KgpError, Result};
use crate::gappy::{
    gappy_model_from_solution, gappy_predict_mean, gappy_predict_var_bounds, interlacing_logdet_bounds, lift_mask,
    nystrom_logdet, solve_pseudovalues_eig, CgSettings, GappyMask, GappyModel,
};
use crate::grid::{fit_from_eig, nlml_from_eig, predict_mean, predict_var, Axis, AxisRole, ProductGrid, DEFAULT_JITTER};
use crate::kernels::{product_covariance, Activation, BaseKernel, FactorKernel, FeatureMap, KernelFamily, ProductKernelSpec};
use crate::kronalg::{eig_factors, kron_matvec, FieldTensor, KronOperator, DENSE_THRESHOLD};
use crate::linalg::{determinant, inverse, sym_eig, trace, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Kron,
    Oracle,
    Lemma1,
    Lemma2,
    Logdet,
}

impl FromStr for Suite {
    type Err = KgpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kron" => Ok(Suite::Kron),
            "oracle" => Ok(Suite::Oracle),
            "lemma1" => Ok(Suite::Lemma1),
            "lemma2" => Ok(Suite::Lemma2),
            "logdet" => Ok(Suite::Logdet),
            _ => val_err(format!("unknown suite {s:?} (kron, oracle, lemma1, lemma2, logdet)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "size")]
pub enum Perturbation {
    #[default]
    None,
    /// Adds size·max(1, ‖y_r‖∞) to every pseudovalue after the solve.
    Pseudovalues(f64),
    /// Scales Kronecker factor 0 by (1 + size) on the structured side.
    Factor(f64),
}

impl Perturbation {
    fn factor_scale(self) -> f64 {
        match self {
            Perturbation::Factor(e) => 1.0 + e,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `None` for informational entries.
    pub tolerance: Option<f64>,
    /// tolerance − value; non-negative means pass.
    pub margin: Option<f64>,
    pub passed: bool,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        let margin = tolerance - value;
        Self { name: name.into(), value, tolerance: Some(tolerance), margin: Some(margin), passed: margin >= 0.0 }
    }

    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), value, tolerance: None, margin: None, passed: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub perturbation: Perturbation,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub perturbation: Perturbation,
    /// Trials per identity in the kron suite.
    pub trials: usize,
    /// Random lattices in the oracle suite.
    pub grid_instances: usize,
    /// Gappy instances per gap fraction.
    pub gappy_per_fraction: usize,
    pub cg_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, perturbation: Perturbation::None, trials: 100, grid_instances: 20, gappy_per_fraction: 4, cg_tol: 1e-8 }
    }
}

pub const ORACLE_TOL: f64 = 1e-8;
pub const KRON_TOL: f64 = 1e-10;
pub const SANDWICH_TOL: f64 = 1e-8;
pub const INTERLACE_TOL: f64 = 1e-8;
pub const QUAD_TOL: f64 = 1e-6;
pub const V_ALPHA_TOL: f64 = 1e-6;
pub const GAP_FRACTIONS: [f64; 3] = [0.1, 0.3, 0.5];

/// ‖a − b‖∞ / max(‖b‖∞, tiny).
pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let s = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    d / s.max(f64::MIN_POSITIVE)
}

fn rel_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<VerifyReport> {
    let checks = match suite {
        Suite::Kron => kron_suite(opts)?,
        Suite::Oracle => oracle_suite(opts)?,
        Suite::Lemma1 => gappy_suite(opts, lemma1_checks)?,
        Suite::Lemma2 => gappy_suite(opts, lemma2_checks)?,
        Suite::Logdet => gappy_suite(opts, logdet_checks)?,
    };
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { suite, seed: opts.seed, perturbation: opts.perturbation, passed, checks })
}

// ------------------------------------------------------------------- kron

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random square matrix shifted to be comfortably invertible.
fn random_invertible(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
    let mut a = random_matrix(rng, n, n).scaled(0.5);
    a.add_diag(n as f64);
    a
}

fn kron_dense(factors: Vec<DenseMatrix>, pert: Perturbation) -> Result<DenseMatrix> {
    let mut factors = factors;
    let s = pert.factor_scale();
    if s != 1.0 {
        factors[0] = factors[0].scaled(s);
    }
    KronOperator::new(factors)?.to_dense(DENSE_THRESHOLD)
}

fn max_rel(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return f64::INFINITY;
    }
    rel_inf(a.data(), b.data())
}

/// The seven Kronecker identities, worst relative error over all trials.
fn kron_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let p = opts.perturbation;
    let mut worst = [0.0f64; 7];
    for _ in 0..opts.trials {
        let mut dim = || rng.random_range(2..=4usize);
        let (m, n, q, r, s) = (dim(), dim(), dim(), dim(), dim());
        let a = random_matrix(&mut rng, m, n);
        let b = random_matrix(&mut rng, q, r);
        let c = random_matrix(&mut rng, n, s);
        let d = random_matrix(&mut rng, r, m);
        // Mixed product.
        let lhs = kron_dense(vec![a.clone(), b.clone()], p)?.matmul(&kron_dense(vec![c.clone(), d.clone()], Perturbation::None)?)?;
        let rhs = kron_dense(vec![a.matmul(&c)?, b.matmul(&d)?], Perturbation::None)?;
        worst[0] = worst[0].max(max_rel(&lhs, &rhs));
        // Inverse.
        let ai = random_invertible(&mut rng, m);
        let bi = random_invertible(&mut rng, q);
        let lhs = inverse(&kron_dense(vec![ai.clone(), bi.clone()], p)?)?;
        let rhs = kron_dense(vec![inverse(&ai)?, inverse(&bi)?], Perturbation::None)?;
        worst[1] = worst[1].max(max_rel(&lhs, &rhs));
        // Transpose.
        let lhs = kron_dense(vec![a.clone(), b.clone()], p)?.transpose();
        let rhs = kron_dense(vec![a.transpose(), b.transpose()], Perturbation::None)?;
        worst[2] = worst[2].max(max_rel(&lhs, &rhs));
        // Trace.
        let lhs = trace(&kron_dense(vec![ai.clone(), bi.clone()], p)?);
        worst[3] = worst[3].max(rel_scalar(lhs, trace(&ai) * trace(&bi)));
        // Determinant: det(A⊗B) = det(A)^{n_B} det(B)^{n_A}.
        let lhs = determinant(&kron_dense(vec![ai.clone(), bi.clone()], p)?)?;
        let rhs = determinant(&ai)?.powi(q as i32) * determinant(&bi)?.powi(m as i32);
        worst[4] = worst[4].max(rel_scalar(lhs, rhs));
        // vec(C X Bᵀ) = (B ⊗ C) vec(X), column-major vec; and the row-major
        // tensor form used by kron_matvec.
        let x = random_matrix(&mut rng, n, r);
        let cc = random_matrix(&mut rng, m, n);
        let bb = random_matrix(&mut rng, q, r);
        let cxb = cc.matmul(&x)?.matmul(&bb.transpose())?;
        let vec_c = |mtx: &DenseMatrix| -> Vec<f64> {
            (0..mtx.cols()).flat_map(|j| (0..mtx.rows()).map(move |i| (i, j))).map(|(i, j)| mtx.get(i, j)).collect()
        };
        let lhs = kron_dense(vec![bb.clone(), cc.clone()], p)?.matvec(&vec_c(&x))?;
        let e1 = rel_inf(&lhs, &vec_c(&cxb));
        let mut fac = vec![cc.clone(), bb.clone()];
        fac[0] = fac[0].scaled(p.factor_scale());
        let t = kron_matvec(&KronOperator::new(fac)?, &FieldTensor::new(vec![n, r], x.data().to_vec())?)?;
        let e2 = rel_inf(t.values(), cxb.data());
        worst[5] = worst[5].max(e1.max(e2));
        // Hadamard.
        let c2 = random_matrix(&mut rng, m, n);
        let d2 = random_matrix(&mut rng, q, r);
        let lhs = kron_dense(vec![a.clone(), b.clone()], p)?.hadamard(&kron_dense(vec![c2.clone(), d2.clone()], Perturbation::None)?)?;
        let rhs = kron_dense(vec![a.hadamard(&c2)?, b.hadamard(&d2)?], Perturbation::None)?;
        worst[6] = worst[6].max(max_rel(&lhs, &rhs));
    }
    let names = ["mixed_product", "inverse", "transpose", "trace", "determinant", "vec", "hadamard"];
    Ok(names.iter().zip(worst).map(|(n, w)| Check::at_most(format!("{n} ({} trials)", opts.trials), w, KRON_TOL)).collect())
}

// --------------------------------------------------------------- instances

fn uniform_points(rng: &mut ChaCha8Rng, n: usize, q: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, q, |_, _| rng.random_range(0.0..1.0))
}

fn random_factor(rng: &mut ChaCha8Rng, q: usize, family: KernelFamily, outputscale: f64, net: bool) -> Result<FactorKernel> {
    let map = if net {
        let seed = rng.random::<u64>();
        FeatureMap::xavier(&[q, 4, 2], Activation::Tanh, seed)?
    } else {
        FeatureMap::identity(q)
    };
    let p = map.output_dim();
    let ls: Vec<f64> = (0..p).map(|_| rng.random_range(0.3..1.2)).collect();
    FactorKernel::new(map, BaseKernel::new(family, &ls, outputscale)?)
}

/// A random product kernel for `grid`: random family, outputscale on factor
/// 0 only, identity or small tanh networks.
pub fn random_spec(rng: &mut ChaCha8Rng, grid: &ProductGrid, allow_nets: bool) -> Result<ProductKernelSpec> {
    let family = if rng.random_bool(0.5) { KernelFamily::SquaredExponential } else { KernelFamily::Matern52 };
    let factors = grid
        .axes()
        .iter()
        .enumerate()
        .map(|(k, ax)| {
            let os = if k == 0 { rng.random_range(0.5..2.0) } else { 1.0 };
            let net = allow_nets && rng.random_bool(0.5);
            random_factor(rng, ax.points.cols(), family, os, net)
        })
        .collect::<Result<Vec<_>>>()?;
    ProductKernelSpec::new(factors)
}

fn random_axes(rng: &mut ChaCha8Rng, max_points: usize) -> Vec<(AxisRole, usize, usize)> {
    loop {
        let mut axes = vec![(AxisRole::Parameter, rng.random_range(2..=5usize), rng.random_range(1..=2usize))];
        for _ in 0..rng.random_range(1..=2usize) {
            axes.push((AxisRole::Spatial, rng.random_range(3..=8usize), 1));
        }
        if rng.random_bool(0.5) {
            axes.push((AxisRole::Temporal, rng.random_range(2..=5usize), 1));
        }
        if axes.iter().map(|a| a.1).product::<usize>() <= max_points {
            return axes;
        }
    }
}

fn grid_from(rng: &mut ChaCha8Rng, layout: &[(AxisRole, usize, usize)]) -> Result<ProductGrid> {
    ProductGrid::new(layout.iter().map(|&(role, n, q)| Axis::new(role, uniform_points(rng, n, q))).collect())
}

#[derive(Clone, Debug)]
pub struct GridInstance {
    pub spec: ProductKernelSpec,
    pub grid: ProductGrid,
    pub y: FieldTensor,
    pub sigma2: f64,
    pub test: ProductGrid,
}

/// Random full lattice with at most 500 points and an independent test grid.
pub fn grid_instance(seed: u64) -> Result<GridInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = random_axes(&mut rng, 500);
    let grid = grid_from(&mut rng, &layout)?;
    let test_layout: Vec<_> = layout.iter().map(|&(r, _, q)| (r, rng.random_range(1..=3usize), q)).collect();
    let test = grid_from(&mut rng, &test_layout)?;
    let spec = random_spec(&mut rng, &grid, true)?;
    let sigma2 = rng.random_range(1e-2..1e-1);
    let y = FieldTensor::new(grid.shape(), (0..grid.len()).map(|_| rng.sample(StandardNormal)).collect())?;
    Ok(GridInstance { spec, grid, y, sigma2, test })
}

#[derive(Clone, Debug)]
pub struct GappyInstance {
    pub spec: ProductKernelSpec,
    pub grid: ProductGrid,
    pub mask: GappyMask,
    pub y_r: Vec<f64>,
    pub sigma2: f64,
    /// Same spatial and temporal axes, new parameters; test_mask = mask.
    pub test: ProductGrid,
}

/// Random gappy lattice with at most 400 points; `round(fraction·M)` spatial
/// points (at least one, never all) are gaps.
pub fn gappy_instance(seed: u64, fraction: f64) -> Result<GappyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = random_axes(&mut rng, 400);
    let grid = grid_from(&mut rng, &layout)?;
    let m = grid.spatial_size();
    let ng = ((fraction * m as f64).round() as usize).clamp(1, m - 1);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let mut flags = vec![true; m];
    for &i in &order[..ng] {
        flags[i] = false;
    }
    let mask = GappyMask::from_flags(grid.spatial_shape(), &flags)?;
    let q = grid.axes()[0].points.cols();
    let test = grid.with_param_points(uniform_points(&mut rng, 2, q))?;
    let spec = random_spec(&mut rng, &grid, true)?;
    let sigma2 = rng.random_range(1e-2..1e-1);
    let n_obs = grid.n_params() * mask.regular().len() * grid.time_size();
    let y_r = (0..n_obs).map(|_| rng.sample(StandardNormal)).collect();
    Ok(GappyInstance { spec, grid, mask, y_r, sigma2, test })
}

/// Dense oracle on the given lattice rows.
pub fn dense_gp_on(spec: &ProductKernelSpec, grid: &ProductGrid, rows: &[usize], y: Vec<f64>, sigma2: f64) -> Result<DenseGP> {
    let all = grid.lattice_points();
    let z = DenseMatrix::from_fn(rows.len(), all.cols(), |i, j| all.get(rows[i], j));
    DenseGP::new(z, y, spec.clone(), grid.factor_dims(), sigma2, DEFAULT_JITTER)
}

// ------------------------------------------------------------------ oracle

fn oracle_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for i in 0..opts.grid_instances {
        let inst = grid_instance(opts.seed.wrapping_mul(1000).wrapping_add(i as u64))?;
        let mut k = product_covariance(&inst.spec, &inst.grid)?;
        let s = opts.perturbation.factor_scale();
        if s != 1.0 {
            k.factors_mut()[0] = k.factors()[0].scaled(s);
        }
        let eig = eig_factors(&k, DEFAULT_JITTER)?;
        let nlml = nlml_from_eig(&eig, &inst.y, inst.sigma2)?;
        let model = fit_from_eig(&inst.spec, &inst.grid, &k, eig, inst.y.clone(), inst.sigma2, DEFAULT_JITTER, 0.0)?;
        let mean = predict_mean(&model, &inst.test)?;
        let var = predict_var(&model, &inst.test)?;

        let rows: Vec<usize> = (0..inst.grid.len()).collect();
        let gp = dense_gp_on(&inst.spec, &inst.grid, &rows, inst.y.values().to_vec(), inst.sigma2)?;
        let d_nlml = dense_nlml(&gp)?;
        let d = dense_predict(&gp, &inst.test.lattice_points())?;
        let tag = format!("instance {i} ({} pts)", inst.grid.len());
        checks.push(Check::at_most(format!("nlml {tag}"), rel_scalar(nlml, d_nlml), ORACLE_TOL));
        checks.push(Check::at_most(format!("mean {tag}"), rel_inf(mean.values(), &d.mean), ORACLE_TOL));
        checks.push(Check::at_most(format!("variance {tag}"), rel_inf(var.var.values(), &d.var), ORACLE_TOL));
    }
    Ok(checks)
}

// ------------------------------------------------------------------- gappy

/// Structured gappy model for an instance, with the perturbation hook
/// applied.
pub fn perturbed_gappy_model(inst: &GappyInstance, cg_tol: f64, pert: Perturbation) -> Result<GappyModel> {
    let mut k = product_covariance(&inst.spec, &inst.grid)?;
    let s = pert.factor_scale();
    if s != 1.0 {
        k.factors_mut()[0] = k.factors()[0].scaled(s);
    }
    let eig = eig_factors(&k, DEFAULT_JITTER)?;
    let lifted = lift_mask(&inst.mask, inst.grid.n_params(), inst.grid.time_size());
    let cg = CgSettings { tol: cg_tol, maxiter: 20_000 };
    let mut sol = solve_pseudovalues_eig(&eig, inst.sigma2, &lifted, &inst.y_r, cg, None)?;
    if let Perturbation::Pseudovalues(e) = pert {
        let scale = inst.y_r.iter().map(|v| v.abs()).fold(1.0, f64::max);
        sol.y_g.iter_mut().for_each(|v| *v += e * scale);
    }
    gappy_model_from_solution(&inst.spec, &inst.grid, &k, eig, &inst.mask, &inst.y_r, sol, inst.sigma2, DEFAULT_JITTER, 0.0)
}

struct GappyCase<'a> {
    index: usize,
    fraction: f64,
    inst: &'a GappyInstance,
    model: &'a GappyModel,
    dense: &'a DenseGP,
    opts: &'a VerifyOptions,
}

impl GappyCase<'_> {
    fn tag(&self, what: &str) -> String {
        format!("{what} instance {} (gaps {:.0}%)", self.index, 100.0 * self.fraction)
    }

    fn test_rows(&self) -> Vec<usize> {
        lift_mask(&self.inst.mask, self.inst.test.n_params(), self.inst.test.time_size()).regular
    }

    fn mean_check(&self) -> Result<Check> {
        let mean = gappy_predict_mean(self.model, &self.inst.test, &self.inst.mask)?;
        let tp = self.inst.test.lattice_points();
        let rows = self.test_rows();
        let z = DenseMatrix::from_fn(rows.len(), tp.cols(), |i, j| tp.get(rows[i], j));
        let d = dense_predict(self.dense, &z)?;
        Ok(Check::at_most(self.tag("gappy mean"), rel_inf(&mean, &d.mean), QUAD_TOL))
    }
}

fn gappy_suite(opts: &VerifyOptions, checks_for: fn(&GappyCase<'_>) -> Result<Vec<Check>>) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut index = 0;
    for &fraction in &GAP_FRACTIONS {
        for _ in 0..opts.gappy_per_fraction {
            let inst = gappy_instance(opts.seed.wrapping_mul(1000).wrapping_add(500 + index as u64), fraction)?;
            let model = perturbed_gappy_model(&inst, opts.cg_tol, opts.perturbation)?;
            let dense = dense_gp_on(&inst.spec, &inst.grid, &model.lifted.regular, inst.y_r.clone(), inst.sigma2)?;
            let case = GappyCase { index, fraction, inst: &inst, model: &model, dense: &dense, opts };
            checks.extend(checks_for(&case)?);
            index += 1;
        }
    }
    Ok(checks)
}

fn lemma1_checks(c: &GappyCase<'_>) -> Result<Vec<Check>> {
    let (_, alpha_r) = c.dense.solve()?;
    let w_alpha = c.model.alpha_regular();
    let v_alpha = c.model.alpha_gaps().iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(vec![
        Check::at_most(c.tag("W·alpha"), rel_inf(&w_alpha, &alpha_r), 10.0 * c.opts.cg_tol),
        Check::at_most(c.tag("|V·alpha|"), v_alpha, V_ALPHA_TOL),
        Check::info(c.tag("cg iterations"), c.model.solution.cg_iterations as f64),
    ])
}

fn lemma2_checks(c: &GappyCase<'_>) -> Result<Vec<Check>> {
    let (lower, upper) = gappy_predict_var_bounds(c.model, &c.inst.test, &c.inst.mask)?;
    let tp = c.inst.test.lattice_points();
    let rows = c.test_rows();
    let z = DenseMatrix::from_fn(rows.len(), tp.cols(), |i, j| tp.get(rows[i], j));
    let d = dense_predict(c.dense, &z)?;
    let below = lower.iter().zip(&d.var).map(|(l, v)| l - v).fold(f64::NEG_INFINITY, f64::max);
    let above = upper.iter().zip(&d.var).map(|(u, v)| v - u).fold(f64::NEG_INFINITY, f64::max);
    let order = lower.iter().zip(&upper).map(|(l, u)| l - u).fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![
        Check::at_most(c.tag("lower - dense var"), below, SANDWICH_TOL),
        Check::at_most(c.tag("dense var - upper"), above, SANDWICH_TOL),
        Check::at_most(c.tag("lower - upper"), order, 0.0),
        c.mean_check()?,
    ])
}

fn logdet_checks(c: &GappyCase<'_>) -> Result<Vec<Check>> {
    let eig = &c.model.model.eig;
    let sigma2 = c.inst.sigma2;
    let n_obs = c.inst.y_r.len();
    let ng = eig.len() - n_obs;
    let full = eig.sorted_eigenvalues();
    let kr = c.dense.covariance(&c.dense.z, &c.dense.z, true)?;
    let (_, sub) = sym_eig(&kr)?;
    let mut upper_gap = f64::NEG_INFINITY;
    let mut lower_gap = f64::NEG_INFINITY;
    for i in 0..n_obs {
        upper_gap = upper_gap.max(sub[i] - full[i]);
        lower_gap = lower_gap.max(full[i + ng] - sub[i]);
    }
    let ratio = c.inst.mask.regular().len() as f64 / c.inst.mask.spatial_size() as f64;
    let nys = nystrom_logdet(eig, ratio, n_obs, sigma2);
    let (ub, lb) = interlacing_logdet_bounds(eig, n_obs, sigma2);
    let exact: f64 = sub.iter().map(|l| (l + sigma2).ln()).sum();
    // Quadratic form: yᵀ(K_Z+σ²I)⁻¹y with pseudovalues vs the dense restricted form.
    let quad = c.model.model.y.dot(&c.model.model.alpha);
    let (_, alpha_r) = c.dense.solve()?;
    let dquad: f64 = c.inst.y_r.iter().zip(&alpha_r).map(|(a, b)| a * b).sum();
    Ok(vec![
        Check::at_most(c.tag("interlace sub - full"), upper_gap, INTERLACE_TOL),
        Check::at_most(c.tag("interlace full[i+ng] - sub"), lower_gap, INTERLACE_TOL),
        Check::at_most(c.tag("nystrom - upper bound"), nys - ub, 0.0),
        Check::at_most(c.tag("lower bound - nystrom"), lb - nys, 0.0),
        Check::info(c.tag("nystrom abs error"), (nys - exact).abs()),
        Check::at_most(c.tag("quadratic form"), rel_scalar(quad, dquad), QUAD_TOL),
    ])
}
