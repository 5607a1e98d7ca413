//! Hyperparameter estimation: NLML over log-parameters and feature weights,
//! central finite-difference gradients, Adam with coupled weight decay.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, num_err, val_err, KgpError, Result};
use crate::gappy::{
    gappy_model_from_solution, gappy_nlml_from_eig, lift_mask, CgSettings, GappyMask, GappyModel, LiftedIndices,
};
use crate::grid::{fit_from_eig, nlml_from_eig, quad_from_rotated, FittedModel, ProductGrid, LN_2PI};
use crate::kernels::{gram, product_covariance, InputScaling, ProductKernelSpec};
use crate::kronalg::{eig_factor, eig_factors, mode_product_t, EigFactors, FieldTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    LogLengthscale,
    LogOutputscale,
    LogNoise,
    FeatureWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub factor: Option<usize>,
    pub kind: ParamKind,
    pub start: usize,
    pub len: usize,
}

/// Flat trainable vector. Layout per factor: feature weights, log
/// lengthscales, then (factor 0 only) log outputscale; log noise last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub schema: Vec<Segment>,
}

impl ParamVector {
    pub fn pack(spec: &ProductKernelSpec, sigma2: f64) -> Self {
        let mut values = Vec::new();
        let mut schema = Vec::new();
        let mut push = |values: &mut Vec<f64>, factor, kind, v: &[f64]| {
            if !v.is_empty() {
                schema.push(Segment { factor, kind, start: values.len(), len: v.len() });
                values.extend_from_slice(v);
            }
        };
        for (f, fk) in spec.factors.iter().enumerate() {
            push(&mut values, Some(f), ParamKind::FeatureWeights, &fk.map.weights_flat());
            push(&mut values, Some(f), ParamKind::LogLengthscale, &fk.base.log_lengthscales);
            if f == 0 {
                push(&mut values, Some(0), ParamKind::LogOutputscale, &[fk.base.log_outputscale]);
            }
        }
        push(&mut values, None, ParamKind::LogNoise, &[sigma2.ln()]);
        Self { values, schema }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_of(&self, i: usize) -> &Segment {
        self.schema.iter().find(|s| i >= s.start && i < s.start + s.len).expect("index inside schema")
    }

    /// Entries subject to weight decay.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for s in self.schema.iter().filter(|s| s.kind == ParamKind::FeatureWeights) {
            m[s.start..s.start + s.len].iter_mut().for_each(|b| *b = true);
        }
        m
    }

    /// Writes the values into a copy of `template`; returns (spec, σ²).
    pub fn unpack(&self, template: &ProductKernelSpec) -> Result<(ProductKernelSpec, f64)> {
        let mut spec = template.clone();
        let mut sigma2 = None;
        for s in &self.schema {
            let v = &self.values[s.start..s.start + s.len];
            match (s.kind, s.factor) {
                (ParamKind::LogNoise, _) => sigma2 = Some(v[0].exp()),
                (_, None) => return val_err("segment without a factor"),
                (kind, Some(f)) => {
                    let fk = spec.factors.get_mut(f).ok_or_else(|| KgpError::Dimension(format!("schema names factor {f}")))?;
                    match kind {
                        ParamKind::FeatureWeights => fk.map.set_weights_flat(v)?,
                        ParamKind::LogLengthscale => {
                            if v.len() != fk.base.log_lengthscales.len() {
                                return dim_err(format!("factor {f}: lengthscale count mismatch"));
                            }
                            fk.base.log_lengthscales.copy_from_slice(v);
                        }
                        ParamKind::LogOutputscale => fk.base.log_outputscale = v[0],
                        ParamKind::LogNoise => unreachable!(),
                    }
                }
            }
        }
        let sigma2 = sigma2.ok_or_else(|| KgpError::Validation("parameter vector has no noise entry".into()))?;
        Ok((spec, sigma2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub step: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 on feature weights only.
    pub weight_decay: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    pub fd_budget: usize,
    pub seed: u64,
    pub cg: CgSettings,
    pub step_decay: Option<StepDecay>,
    pub init_noise: f64,
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 2.5e-5,
            max_iters: 1000,
            fd_step: 1e-5,
            fd_budget: 2000,
            seed: 0,
            cg: CgSettings::default(),
            step_decay: None,
            init_noise: 5e-3,
            jitter: crate::grid::DEFAULT_JITTER,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("learning_rate", self.learning_rate),
            ("eps", self.eps),
            ("fd_step", self.fd_step),
            ("init_noise", self.init_noise),
            ("cg.tol", self.cg.tol),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return val_err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return val_err("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.jitter >= 0.0) {
            return val_err("weight_decay and jitter must be non-negative");
        }
        if let Some(d) = self.step_decay {
            if d.step == 0 || !(d.factor > 0.0) {
                return val_err("step decay needs a positive step and factor");
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        match self.step_decay {
            Some(d) => self.learning_rate * d.factor.powi((t / d.step) as i32),
            None => self.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub nlml: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    pub cg_iters: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,nlml,grad_norm,seconds,cg_iters\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.nlml, r.grad_norm, r.seconds, r.cg_iters));
        }
        s
    }
}

/// Training data: a full lattice or a gappy one.
#[derive(Clone, Debug)]
pub enum Problem {
    Grid { grid: ProductGrid, y: FieldTensor },
    Gappy { grid: ProductGrid, mask: GappyMask, y_r: Vec<f64> },
}

impl Problem {
    pub fn grid(&self) -> &ProductGrid {
        match self {
            Problem::Grid { grid, .. } | Problem::Gappy { grid, .. } => grid,
        }
    }

    /// Observed target values.
    pub fn observed(&self) -> &[f64] {
        match self {
            Problem::Grid { y, .. } => y.values(),
            Problem::Gappy { y_r, .. } => y_r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Problem::Grid { grid, y } => {
                if y.shape() != grid.shape().as_slice() {
                    return dim_err(format!("targets {:?} vs grid {:?}", y.shape(), grid.shape()));
                }
            }
            Problem::Gappy { grid, mask, y_r } => {
                if mask.shape() != grid.spatial_shape().as_slice() {
                    return dim_err("mask does not match the spatial lattice");
                }
                let n = grid.n_params() * mask.regular().len() * grid.time_size();
                if y_r.len() != n {
                    return dim_err(format!("{} regular targets, expected {n}", y_r.len()));
                }
            }
        }
        if self.observed().iter().any(|v| !v.is_finite()) {
            return val_err("targets contain non-finite values");
        }
        Ok(())
    }

    /// Copy with every target shifted by −c.
    pub fn shifted(&self, c: f64) -> Self {
        match self {
            Problem::Grid { grid, y } => Problem::Grid { grid: grid.clone(), y: y.map(|v| v - c) },
            Problem::Gappy { grid, mask, y_r } => {
                Problem::Gappy { grid: grid.clone(), mask: mask.clone(), y_r: y_r.iter().map(|v| v - c).collect() }
            }
        }
    }
}

/// Objective value plus what a gappy evaluation produces on the side.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub nlml: f64,
    pub y_g: Option<Vec<f64>>,
    pub cg_iters: usize,
}

/// NLML at `params`; exact on full lattices, Nyström log-det on gappy ones.
pub fn objective(params: &ParamVector, template: &ProductKernelSpec, problem: &Problem, cfg: &TrainConfig) -> Result<f64> {
    Ok(evaluate(params, template, problem, cfg, None)?.nlml)
}

/// As [`objective`], with an optional CG warm start for the pseudovalues.
pub fn evaluate(
    params: &ParamVector,
    template: &ProductKernelSpec,
    problem: &Problem,
    cfg: &TrainConfig,
    warm: Option<&[f64]>,
) -> Result<Evaluation> {
    let (spec, sigma2) = params.unpack(template)?;
    let k = product_covariance(&spec, problem.grid())?;
    let eig = eig_factors(&k, cfg.jitter)?;
    let ev = eval_with_eig(&eig, sigma2, problem, cfg, warm)?;
    if !ev.nlml.is_finite() {
        return num_err(format!("non-finite NLML at parameters {:?}", params.values));
    }
    Ok(ev)
}

fn eval_with_eig(eig: &EigFactors, sigma2: f64, problem: &Problem, cfg: &TrainConfig, warm: Option<&[f64]>) -> Result<Evaluation> {
    match problem {
        Problem::Grid { y, .. } => Ok(Evaluation { nlml: nlml_from_eig(eig, y, sigma2)?, y_g: None, cg_iters: 0 }),
        Problem::Gappy { grid, mask, y_r } => {
            let lifted = lift_mask(mask, grid.n_params(), grid.time_size());
            let r = gappy_nlml_from_eig(eig, mask, &lifted, y_r, sigma2, cfg.cg, warm)?;
            Ok(Evaluation { nlml: r.value, cg_iters: r.solution.cg_iterations, y_g: Some(r.solution.y_g) })
        }
    }
}

/// Central differences of an arbitrary objective, coordinates in parallel.
pub fn grad_fd(f: impl Fn(&[f64]) -> Result<f64> + Sync, params: &[f64], step: f64) -> Result<Vec<f64>> {
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut v = params.to_vec();
            v[i] = params[i] + step;
            let fp = f(&v)?;
            v[i] = params[i] - step;
            let fm = f(&v)?;
            if !fp.is_finite() || !fm.is_finite() {
                return num_err(format!("non-finite objective when perturbing component {i}"));
            }
            Ok((fp - fm) / (2.0 * step))
        })
        .collect()
}

/// Cached state at one parameter vector, reused by every FD perturbation:
/// per-factor Gram matrices, their eigendecompositions and, for full
/// lattices, the partially rotated targets y ×_{j≠k} U_jᵀ.
struct GradientCache {
    eig: EigFactors,
    partial: Vec<FieldTensor>,
    rotated: Option<FieldTensor>,
    lifted: Option<LiftedIndices>,
    y_g: Option<Vec<f64>>,
}

impl GradientCache {
    fn new(params: &ParamVector, template: &ProductKernelSpec, problem: &Problem, cfg: &TrainConfig, y_g: Option<Vec<f64>>) -> Result<Self> {
        let (spec, _) = params.unpack(template)?;
        let k = product_covariance(&spec, problem.grid())?;
        let eig = eig_factors(&k, cfg.jitter)?;
        let (partial, rotated, lifted) = match problem {
            Problem::Grid { y, .. } => {
                let nf = eig.vectors.len();
                let partial = (0..nf)
                    .map(|k| {
                        let mut t = y.clone();
                        for (j, u) in eig.vectors.iter().enumerate() {
                            if j != k {
                                t = mode_product_t(&t, j, u)?;
                            }
                        }
                        Ok(t)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let rotated = mode_product_t(&partial[0], 0, &eig.vectors[0])?;
                (partial, Some(rotated), None)
            }
            Problem::Gappy { grid, mask, .. } => (Vec::new(), None, Some(lift_mask(mask, grid.n_params(), grid.time_size()))),
        };
        Ok(Self { eig, partial, rotated, lifted, y_g })
    }

    /// NLML at a perturbed copy of the parameters that differs from the cached
    /// point only in `segment`.
    fn eval(&self, params: &ParamVector, seg: &Segment, template: &ProductKernelSpec, problem: &Problem, cfg: &TrainConfig) -> Result<f64> {
        let (spec, sigma2) = params.unpack(template)?;
        let mut eig = self.eig.clone();
        let factor = seg.factor;
        if let Some(f) = factor {
            let ax = &problem.grid().axes()[f];
            let kf = gram(&spec.factors[f], &ax.points, &ax.points)?;
            let (u, d, e) = eig_factor(&kf, cfg.jitter, f)?;
            eig.vectors[f] = u;
            eig.values[f] = d;
            eig.jitters[f] = e;
        }
        let v = match problem {
            Problem::Grid { y, .. } => {
                let w = match factor {
                    Some(f) => mode_product_t(&self.partial[f], f, &eig.vectors[f])?,
                    None => self.rotated.clone().expect("grid cache"),
                };
                let quad = quad_from_rotated(&eig, &w, sigma2);
                let logdet = crate::kronalg::logdet_from_eigs(&eig, sigma2)?;
                0.5 * quad + 0.5 * logdet + 0.5 * y.len() as f64 * LN_2PI
            }
            Problem::Gappy { mask, y_r, .. } => {
                let lifted = self.lifted.as_ref().expect("gappy cache");
                gappy_nlml_from_eig(&eig, mask, lifted, y_r, sigma2, cfg.cg, self.y_g.as_deref())?.value
            }
        };
        Ok(v)
    }
}

/// FD gradient of the NLML, reusing per-factor caches so each perturbed
/// evaluation redoes only the touched factor.
pub fn objective_gradient(
    params: &ParamVector,
    template: &ProductKernelSpec,
    problem: &Problem,
    cfg: &TrainConfig,
    y_g: Option<Vec<f64>>,
) -> Result<Vec<f64>> {
    if params.len() > cfg.fd_budget {
        return val_err(format!("{} parameters exceed the finite-difference budget {}", params.len(), cfg.fd_budget));
    }
    let cache = GradientCache::new(params, template, problem, cfg, y_g)?;
    let h = cfg.fd_step;
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let seg = params.segment_of(i);
            let mut p = params.clone();
            p.values[i] = params.values[i] + h;
            let fp = cache.eval(&p, seg, template, problem, cfg)?;
            p.values[i] = params.values[i] - h;
            let fm = cache.eval(&p, seg, template, problem, cfg)?;
            if !fp.is_finite() || !fm.is_finite() {
                return num_err(format!("non-finite objective when perturbing component {i} ({:?})", seg.kind));
            }
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken so far.
    pub t: usize,
    pub decay_mask: Vec<bool>,
}

impl AdamState {
    pub fn new(params: Vec<f64>, decay_mask: Vec<bool>) -> Self {
        let n = params.len();
        Self { params, m: vec![0.0; n], v: vec![0.0; n], t: 0, decay_mask }
    }
}

/// One Adam step; weight decay is added to the gradient of masked entries.
pub fn adam_step(state: &AdamState, grad: &[f64], cfg: &TrainConfig) -> AdamState {
    let t = state.t + 1;
    let lr = cfg.lr_at(state.t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut next = state.clone();
    next.t = t;
    for i in 0..state.params.len() {
        let mut g = grad[i];
        if state.decay_mask[i] {
            g += cfg.weight_decay * state.params[i];
        }
        next.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        next.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = next.m[i] / bc1;
        let vh = next.v[i] / bc2;
        next.params[i] = state.params[i] - lr * mh / (vh.sqrt() + cfg.eps);
    }
    next
}

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Grid(FittedModel),
    Gappy(GappyModel),
}

impl TrainedModel {
    pub fn fitted(&self) -> &FittedModel {
        match self {
            TrainedModel::Grid(m) => m,
            TrainedModel::Gappy(g) => &g.model,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub spec: ProductKernelSpec,
    pub sigma2: f64,
    pub params: ParamVector,
    pub offset: f64,
    pub trace: TrainTrace,
    pub initial_nlml: f64,
    pub best_nlml: f64,
    pub best_iteration: usize,
    /// Set when training stopped after repeated non-finite objectives.
    pub aborted: Option<String>,
}

/// Standard initialization: feature-map input scaling from the axis ranges,
/// lengthscales at half the (latent) axis range, outputscale at var(y).
pub fn initialize(template: &ProductKernelSpec, grid: &ProductGrid, observed: &[f64], init_noise: f64) -> Result<(ProductKernelSpec, f64)> {
    let mut spec = template.clone();
    if spec.factors.len() != grid.axes().len() {
        return val_err("kernel factor count differs from grid axis count");
    }
    for (fk, ax) in spec.factors.iter_mut().zip(grid.axes()) {
        if !fk.map.is_identity() {
            fk.map.scaling = Some(InputScaling::from_points(&ax.points));
        }
        let feats = fk.map.forward(&ax.points)?;
        let ranges = crate::grid::Axis::new(ax.role, feats).ranges();
        fk.base.log_lengthscales = ranges.iter().map(|&r| if r > 0.0 { (0.5 * r).ln() } else { 0.0 }).collect();
    }
    let n = observed.len().max(1) as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    spec.factors[0].base.log_outputscale = if var > 0.0 { var.ln() } else { 0.0 };
    Ok((spec, init_noise))
}

fn build_model(spec: &ProductKernelSpec, sigma2: f64, problem: &Problem, cfg: &TrainConfig, offset: f64) -> Result<TrainedModel> {
    let grid = problem.grid();
    let k = product_covariance(spec, grid)?;
    let eig = eig_factors(&k, cfg.jitter)?;
    match problem {
        Problem::Grid { y, .. } => Ok(TrainedModel::Grid(fit_from_eig(spec, grid, &k, eig, y.clone(), sigma2, cfg.jitter, offset)?)),
        Problem::Gappy { mask, y_r, .. } => {
            let lifted = lift_mask(mask, grid.n_params(), grid.time_size());
            let sol = crate::gappy::solve_pseudovalues_eig(&eig, sigma2, &lifted, y_r, cfg.cg, None)?;
            Ok(TrainedModel::Gappy(gappy_model_from_solution(spec, grid, &k, eig, mask, y_r, sol, sigma2, cfg.jitter, offset)?))
        }
    }
}

/// Fits fixed hyperparameters to `problem` with targets centered by `offset`.
pub fn fit_problem(problem: &Problem, spec: &ProductKernelSpec, sigma2: f64, offset: f64, cfg: &TrainConfig) -> Result<TrainedModel> {
    problem.validate()?;
    build_model(spec, sigma2, &problem.shifted(offset), cfg, offset)
}

/// Adam on the NLML from `(spec, sigma2)`; targets are centered by their mean
/// and the returned model adds it back. Returns the best iterate.
pub fn train(problem: &Problem, spec: &ProductKernelSpec, sigma2: f64, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    problem.validate()?;
    spec.validate()?;
    let obs = problem.observed();
    let offset = obs.iter().sum::<f64>() / obs.len().max(1) as f64;
    let centered = problem.shifted(offset);
    let start = Instant::now();

    let init = ParamVector::pack(spec, sigma2);
    if init.len() > cfg.fd_budget {
        return val_err(format!("{} parameters exceed the finite-difference budget {}", init.len(), cfg.fd_budget));
    }
    let mut state = AdamState::new(init.values.clone(), init.decay_mask());
    let mut trace = TrainTrace::default();
    let first = evaluate(&init, spec, &centered, cfg, None)?;
    let initial_nlml = first.nlml;
    let mut best = (initial_nlml, 0usize, init.values.clone());
    let mut current = Some(first);
    let mut failures = 0usize;
    let mut lr_scale = 1.0;
    let mut aborted = None;
    let mut warm: Option<Vec<f64>> = current.as_ref().and_then(|e| e.y_g.clone());

    for it in 0..cfg.max_iters {
        let ev = current.take().expect("current evaluation");
        let mut p = init.clone();
        p.values.copy_from_slice(&state.params);
        let grad = match objective_gradient(&p, spec, &centered, cfg, ev.y_g.clone()) {
            Ok(g) => g,
            Err(e) => {
                failures += 1;
                if failures >= 3 {
                    aborted = Some(format!("gradient failed three times in a row: {e}"));
                    break;
                }
                state = AdamState::new(best.2.clone(), init.decay_mask());
                lr_scale *= 0.5;
                let mut r = init.clone();
                r.values.copy_from_slice(&state.params);
                current = Some(evaluate(&r, spec, &centered, cfg, None)?);
                continue;
            }
        };
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.rows.push(TraceRow {
            iteration: it,
            nlml: ev.nlml,
            grad_norm: gnorm,
            seconds: start.elapsed().as_secs_f64(),
            cg_iters: ev.cg_iters,
        });
        let mut step_cfg = cfg.clone();
        step_cfg.learning_rate *= lr_scale;
        let next = adam_step(&state, &grad, &step_cfg);
        let mut q = init.clone();
        q.values.copy_from_slice(&next.params);
        match evaluate(&q, spec, &centered, cfg, warm.as_deref()) {
            Ok(e) if e.nlml.is_finite() => {
                failures = 0;
                if e.nlml < best.0 - 1e-12 {
                    best = (e.nlml, it + 1, next.params.clone());
                }
                if e.y_g.is_some() {
                    warm = e.y_g.clone();
                }
                state = next;
                current = Some(e);
            }
            other => {
                failures += 1;
                let why = match other {
                    Err(e) => e.to_string(),
                    Ok(e) => format!("objective {}", e.nlml),
                };
                if failures >= 3 {
                    aborted = Some(format!("three consecutive non-finite objectives, last: {why}"));
                    break;
                }
                // Back off to the best iterate with a smaller step.
                lr_scale *= 0.5;
                state = AdamState::new(best.2.clone(), init.decay_mask());
                let mut r = init.clone();
                r.values.copy_from_slice(&state.params);
                current = Some(evaluate(&r, spec, &centered, cfg, None)?);
            }
        }
    }

    let mut params = init.clone();
    params.values = best.2;
    let (best_spec, best_sigma2) = params.unpack(spec)?;
    let model = build_model(&best_spec, best_sigma2, &centered, cfg, offset)?;
    Ok(TrainOutcome {
        model,
        spec: best_spec,
        sigma2: best_sigma2,
        params,
        offset,
        trace,
        initial_nlml,
        best_nlml: best.0,
        best_iteration: best.1,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis, AxisRole};
    use crate::kernels::{Activation, BaseKernel, FactorKernel, FeatureMap, KernelFamily};

    fn spec_with_net() -> ProductKernelSpec {
        ProductKernelSpec::new(vec![
            FactorKernel::stationary(KernelFamily::Matern52, &[0.5], 1.2).unwrap(),
            FactorKernel::new(
                FeatureMap::xavier(&[1, 3, 2], Activation::Tanh, 4).unwrap(),
                BaseKernel::new(KernelFamily::Matern52, &[0.7, 0.9], 1.0).unwrap(),
            )
            .unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn pack_unpack_round_trip() {
        let spec = spec_with_net();
        let p = ParamVector::pack(&spec, 0.01);
        let (s2, n2) = p.unpack(&spec).unwrap();
        assert_eq!(s2, spec);
        assert!((n2 - 0.01).abs() < 1e-17);
        assert_eq!(p.len(), 1 + 1 + (3 + 3 + 6 + 2) + 2 + 1);
        assert_eq!(p.decay_mask().iter().filter(|b| **b).count(), 14);
    }

    #[test]
    fn quadratic_calibration_gradient() {
        let theta = vec![0.3, -1.2, 2.0];
        let g = grad_fd(|v: &[f64]| Ok(v.iter().map(|x| x * x).sum()), &theta, 1e-5).unwrap();
        for (gi, ti) in g.iter().zip(&theta) {
            assert!((gi - 2.0 * ti).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_coordinate_has_zero_gradient() {
        let g = grad_fd(|v: &[f64]| Ok(v[0] * v[0]), &[1.0, 5.0], 1e-5).unwrap();
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = TrainConfig::default();
        let s = AdamState::new(vec![0.0, 1.0], vec![false, false]);
        let n = adam_step(&s, &[3.0, -2.0], &cfg);
        // Bias correction makes the first step exactly lr·g/(|g|+eps).
        assert!((n.params[0] + cfg.learning_rate * 3.0 / (3.0 + cfg.eps)).abs() < 1e-15);
        assert!((n.params[1] - 1.0 - cfg.learning_rate * 2.0 / (2.0 + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays_weights() {
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut s = AdamState::new(vec![1.0, 1.0], vec![true, false]);
        for _ in 0..20 {
            s = adam_step(&s, &[0.0, 0.0], &cfg);
        }
        assert!(s.params[0] < 1.0);
        assert_eq!(s.params[1], 1.0);
    }

    #[test]
    fn adam_descends_quadratic() {
        let cfg = TrainConfig { learning_rate: 0.05, ..TrainConfig::default() };
        let mut s = AdamState::new(vec![1.0, -2.0, 0.5], vec![false; 3]);
        let mut norms = Vec::new();
        for _ in 0..50 {
            let g: Vec<f64> = s.params.iter().map(|x| 2.0 * x).collect();
            s = adam_step(&s, &g, &cfg);
            norms.push(s.params.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        assert!(norms.windows(2).skip(5).all(|w| w[1] <= w[0] + 1e-12), "{norms:?}");
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig { step_decay: Some(StepDecay { step: 100, factor: 0.8 }), ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(99), 1e-2);
        assert!((cfg.lr_at(100) - 8e-3).abs() < 1e-18);
        assert!((cfg.lr_at(250) - 1e-2 * 0.64).abs() < 1e-17);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate":0.1,"bogus":1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"max_iters":3}"#).unwrap();
        assert_eq!(c.beta1, 0.5);
        assert_eq!(c.cg.maxiter, 2000);
    }

    #[test]
    fn zero_iterations_returns_init() {
        let spec = spec_with_net();
        let grid = ProductGrid::new(vec![Axis::line(AxisRole::Parameter, &[0.0, 1.0]), Axis::line(AxisRole::Spatial, &[0.0, 0.3, 0.7])]).unwrap();
        let y = FieldTensor::new(grid.shape(), vec![1., 2., 0., 1., 3., 2.]).unwrap();
        let cfg = TrainConfig { max_iters: 0, ..TrainConfig::default() };
        let out = train(&Problem::Grid { grid, y }, &spec, 5e-3, &cfg).unwrap();
        assert_eq!(out.spec, spec);
        assert_eq!(out.best_nlml, out.initial_nlml);
        assert!(out.trace.rows.is_empty());
    }
}
