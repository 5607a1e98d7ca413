//! Library side of the `kgp` subcommands: generate, train and predict. The
//! binary only parses flags and maps errors to exit codes.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::synth::{holed_square_snapshot, HoledSquare};
use crate::datagen::{burgers_design, burgers_solve, embed_to_lattice, relative_error, sobol, BurgersConfig};
use crate::error::{val_err, KgpError, Result};
use crate::gappy::{gappy_predict_mean, gappy_predict_var_bounds, lift_mask, scatter, GappyMask};
use crate::grid::{predict_mean, predict_var, Axis, AxisRole, ProductGrid};
use crate::io::{
    load_split, read_json, write_bytes, write_json, DatasetSection, KernelSection, Manifest, MaskSource, ModelFile,
    RunConfig, SnapshotEntry, Split, TensorFile, SYNTH_BOX,
};
use crate::kernels::{BaseKernel, FactorKernel, FeatureMap, ProductKernelSpec};
use crate::kronalg::FieldTensor;
use crate::training::{fit_problem, initialize, train, Problem, TrainOutcome, TrainedModel};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

fn snapshot_name(split: &str, i: usize) -> String {
    format!("{split}_{i:03}.kgp")
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Writes snapshot files and `manifest.json` under `out`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let Some(ds) = &cfg.dataset else {
        return val_err("config has no dataset section");
    };
    let manifest = match ds {
        DatasetSection::Burgers { n, m, nt, t_final, test_params, params } => {
            let train_params = params.clone().unwrap_or_else(|| burgers_design(*n));
            if train_params.len() != *n {
                return val_err(format!("n = {n} but {} explicit parameters given", train_params.len()));
            }
            let solve = |mu: &[f64; 2]| {
                let mut c = BurgersConfig::new(mu[0], mu[1], *m, *nt);
                c.t_final = *t_final;
                burgers_solve(&c)
            };
            let train_sols: Vec<_> = train_params.par_iter().map(solve).collect::<Result<_>>()?;
            let test_sols: Vec<_> = test_params.par_iter().map(solve).collect::<Result<_>>()?;
            let roles = vec![AxisRole::Spatial, AxisRole::Temporal];
            let write_split = |name: &str, ps: &[[f64; 2]], sols: &[crate::datagen::BurgersSolution]| -> Result<Vec<SnapshotEntry>> {
                ps.iter()
                    .zip(sols)
                    .enumerate()
                    .map(|(i, (p, s))| {
                        let file = snapshot_name(name, i);
                        TensorFile::new(s.field.clone(), roles.clone(), None)?.write(&out.join(&file))?;
                        Ok(SnapshotEntry { params: p.to_vec(), file })
                    })
                    .collect()
            };
            let train = write_split("train", &train_params, &train_sols)?;
            let test = write_split("test", test_params, &test_sols)?;
            let first = &train_sols[0];
            let max_res = train_sols.iter().chain(&test_sols).map(|s| s.max_balance_residual).fold(0.0, f64::max);
            let halvings: usize = train_sols.iter().chain(&test_sols).map(|s| s.halvings).sum();
            Manifest {
                preset: "burgers".into(),
                seed: cfg.seed,
                axes: vec![Axis::line(AxisRole::Spatial, &first.x), Axis::line(AxisRole::Temporal, &first.t)],
                train,
                test,
                info: serde_json::json!({
                    "scheme": "godunov",
                    "dt": BurgersConfig::new(0.0, 0.0, 3, 1).dt,
                    "t_final": t_final,
                    "max_balance_residual": max_res,
                    "cfl_halvings": halvings,
                }),
            }
        }
        DatasetSection::HoledSquare { n, lattice, samples_per_side, hole_radius, radius, test_params } => {
            let geom = HoledSquare { half_width: 1.0, hole_radius: *hole_radius, samples_per_side: *samples_per_side };
            geom.validate()?;
            let axis = linspace(-1.0, 1.0, *lattice);
            let axes = vec![axis.clone(), axis.clone()];
            let train_params: Vec<[f64; 2]> = sobol::sobol_2d(*n, 1)
                .into_iter()
                .map(|[a, b]| {
                    [SYNTH_BOX[0].0 + a * (SYNTH_BOX[0].1 - SYNTH_BOX[0].0), SYNTH_BOX[1].0 + b * (SYNTH_BOX[1].1 - SYNTH_BOX[1].0)]
                })
                .collect();
            let embed = |mu: &[f64; 2]| -> Result<(FieldTensor, GappyMask)> {
                embed_to_lattice(&holed_square_snapshot(&geom, mu)?, &axes, *radius)
            };
            let roles = vec![AxisRole::Spatial, AxisRole::Spatial];
            let write_split = |name: &str, ps: &[[f64; 2]]| -> Result<Vec<SnapshotEntry>> {
                ps.iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let (t, mask) = embed(p)?;
                        let file = snapshot_name(name, i);
                        TensorFile::new(t, roles.clone(), Some(mask.flags()))?.write(&out.join(&file))?;
                        Ok(SnapshotEntry { params: p.to_vec(), file })
                    })
                    .collect()
            };
            let train = write_split("train", &train_params)?;
            let test = write_split("test", test_params)?;
            Manifest {
                preset: "holed_square".into(),
                seed: cfg.seed,
                axes: vec![Axis::line(AxisRole::Spatial, &axis), Axis::line(AxisRole::Spatial, &axis)],
                train,
                test,
                info: serde_json::json!({ "hole_radius": hole_radius, "stencil_radius": radius }),
            }
        }
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    Ok(manifest)
}

/// Kernel template for `grid`: identity maps unless a factor section asks
/// for a network. Only factor 0 carries an outputscale.
pub fn build_spec(kernel: &KernelSection, grid: &ProductGrid, seed: u64) -> Result<ProductKernelSpec> {
    let axes = grid.axes();
    if !kernel.factors.is_empty() && kernel.factors.len() != axes.len() {
        return val_err(format!("{} kernel factor sections for {} grid axes", kernel.factors.len(), axes.len()));
    }
    let factors = axes
        .iter()
        .enumerate()
        .map(|(k, ax)| {
            let q = ax.points.cols();
            let sec = kernel.factors.get(k);
            let family = sec.and_then(|s| s.family).unwrap_or(kernel.family);
            let map = match sec {
                Some(s) if !s.hidden.is_empty() || s.latent.is_some() => {
                    let mut sizes = vec![q];
                    sizes.extend(&s.hidden);
                    sizes.push(s.latent.unwrap_or(q));
                    FeatureMap::xavier(&sizes, s.activation, seed.wrapping_add(k as u64))?
                }
                _ => FeatureMap::identity(q),
            };
            let p = map.output_dim();
            FactorKernel::new(map, BaseKernel::new(family, &vec![1.0; p], 1.0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    ProductKernelSpec::new(factors)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_nlml: f64,
    pub best_nlml: f64,
    pub best_iteration: usize,
    pub iterations: usize,
    pub sigma2: f64,
    pub offset: f64,
    pub gappy: bool,
    pub aborted: Option<String>,
}

fn entry_mask(problem: &Problem) -> Option<Vec<bool>> {
    match problem {
        Problem::Gappy { grid, mask, .. } => {
            let lifted = lift_mask(mask, grid.n_params(), grid.time_size());
            let mut flags = vec![false; lifted.len];
            for &i in &lifted.regular {
                flags[i] = true;
            }
            Some(flags)
        }
        Problem::Grid { .. } => None,
    }
}

/// Full-lattice tensor with NaN at gaps.
fn full_targets(problem: &Problem) -> Result<FieldTensor> {
    match problem {
        Problem::Grid { y, .. } => Ok(y.clone()),
        Problem::Gappy { grid, mask, y_r } => {
            let lifted = lift_mask(mask, grid.n_params(), grid.time_size());
            let mut v = scatter(y_r, &lifted.regular, lifted.len);
            for &i in &lifted.gaps {
                v[i] = f64::NAN;
            }
            FieldTensor::new(grid.shape(), v)
        }
    }
}

/// Trains on the manifest's training split and writes the model, targets,
/// trace and summary under `out`. An aborted run still writes everything.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Some(manifest) = &cfg.grid.manifest else {
        return val_err("config grid section needs a manifest path");
    };
    let split = load_split(manifest, Split::Train, cfg.gappy.mask)?;
    let problem = split.problem();
    let mut tcfg = cfg.training.clone();
    tcfg.cg = cfg.gappy.cg;
    let template = build_spec(&cfg.kernel, &split.grid, cfg.seed)?;
    let (spec, sigma2) = initialize(&template, &split.grid, problem.observed(), tcfg.init_noise)?;
    let outcome = train(&problem, &spec, sigma2, &tcfg)?;

    let mask = match &problem {
        Problem::Gappy { mask, .. } => Some(mask.clone()),
        Problem::Grid { .. } => None,
    };
    TensorFile::new(full_targets(&problem)?, split.grid.roles(), entry_mask(&problem))?.write(&out.join("targets.kgp"))?;
    let model = ModelFile {
        spec: outcome.spec.clone(),
        sigma2: outcome.sigma2,
        offset: outcome.offset,
        jitter: tcfg.jitter,
        grid: split.grid.clone(),
        mask,
        cg: tcfg.cg,
        targets: "targets.kgp".into(),
        manifest: Some(manifest.clone()),
    };
    write_json(&out.join("model.json"), &model)?;
    write_bytes(&out.join("trace.csv"), outcome.trace.to_csv().as_bytes())?;
    let summary = TrainSummary {
        initial_nlml: outcome.initial_nlml,
        best_nlml: outcome.best_nlml,
        best_iteration: outcome.best_iteration,
        iterations: outcome.trace.rows.len(),
        sigma2: outcome.sigma2,
        offset: outcome.offset,
        gappy: model.mask.is_some(),
        aborted: outcome.aborted.clone(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    let mut resolved = cfg.clone();
    resolved.training = tcfg;
    write_json(&out.join(RESOLVED_CONFIG), &resolved)?;
    Ok(outcome)
}

/// Reads a model file and refits it to its stored targets.
pub fn load_model(path: &Path) -> Result<(ModelFile, TrainedModel)> {
    let mf: ModelFile = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let tf = TensorFile::read(&base.join(&mf.targets))?;
    if tf.tensor.shape() != mf.grid.shape().as_slice() {
        return val_err("stored targets do not match the model grid");
    }
    let problem = match &mf.mask {
        Some(mask) => {
            let lifted = lift_mask(mask, mf.grid.n_params(), mf.grid.time_size());
            let y_r = lifted.regular.iter().map(|&i| tf.tensor.values()[i]).collect();
            Problem::Gappy { grid: mf.grid.clone(), mask: mask.clone(), y_r }
        }
        None => Problem::Grid { grid: mf.grid.clone(), y: tf.tensor.clone() },
    };
    let tcfg = crate::training::TrainConfig { jitter: mf.jitter, cg: mf.cg, ..Default::default() };
    let model = fit_problem(&problem, &mf.spec, mf.sigma2, mf.offset, &tcfg)?;
    Ok((mf, model))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictReport {
    pub test_params: Vec<Vec<f64>>,
    /// Per test snapshot, over its regular points.
    pub relative_errors: Option<Vec<f64>>,
    pub mean_relative_error: Option<f64>,
    pub clamped_variances: usize,
    pub files: Vec<String>,
}

/// Mean and variance (gappy: variance bounds) on the test split of
/// `test_manifest` (default: the model's own manifest).
pub fn predict_run(model_path: &Path, test_manifest: Option<&Path>, out: &Path, truth: bool) -> Result<PredictReport> {
    let (mf, model) = load_model(model_path)?;
    let manifest: PathBuf = match (test_manifest, &mf.manifest) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p.clone(),
        (None, None) => return val_err("no test manifest given and the model records none"),
    };
    let source = if mf.mask.is_some() { MaskSource::FromData } else { MaskSource::AllRegular };
    let test = load_split(&manifest, Split::Test, source)?;
    let roles = test.grid.roles();
    let n_test = test.grid.n_params();
    let per = test.grid.len() / n_test;
    let mut files = Vec::new();
    let (pred_regular, regular_idx, clamped) = match &model {
        TrainedModel::Grid(fm) => {
            let mean = predict_mean(fm, &test.grid)?;
            let var = predict_var(fm, &test.grid)?;
            TensorFile::new(mean.clone(), roles.clone(), None)?.write(&out.join("mean.kgp"))?;
            TensorFile::new(var.var, roles.clone(), None)?.write(&out.join("var.kgp"))?;
            files.extend(["mean.kgp".to_string(), "var.kgp".to_string()]);
            ((mean.into_values()), (0..test.grid.len()).collect::<Vec<_>>(), var.clamped)
        }
        TrainedModel::Gappy(gm) => {
            let tmask = test.mask.clone().unwrap_or_else(|| GappyMask::all_regular(test.grid.spatial_shape()));
            let lifted = lift_mask(&tmask, n_test, test.grid.time_size());
            let mean = gappy_predict_mean(gm, &test.grid, &tmask)?;
            let (lower, upper) = gappy_predict_var_bounds(gm, &test.grid, &tmask)?;
            let mut flags = vec![false; lifted.len];
            for &i in &lifted.regular {
                flags[i] = true;
            }
            for (name, vals) in [("mean.kgp", &mean), ("var_lower.kgp", &lower), ("var_upper.kgp", &upper)] {
                let mut full = vec![f64::NAN; lifted.len];
                for (&i, &v) in lifted.regular.iter().zip(vals.iter()) {
                    full[i] = v;
                }
                TensorFile::new(FieldTensor::new(test.grid.shape(), full)?, roles.clone(), Some(flags.clone()))?
                    .write(&out.join(name))?;
                files.push(name.to_string());
            }
            (mean, lifted.regular, 0)
        }
    };
    let (relative_errors, mean_relative_error) = if truth {
        let mut errs = Vec::with_capacity(n_test);
        for p in 0..n_test {
            let (mut t, mut y) = (Vec::new(), Vec::new());
            for (k, &i) in regular_idx.iter().enumerate() {
                if i / per == p {
                    t.push(test.values.values()[i]);
                    y.push(pred_regular[k]);
                }
            }
            errs.push(relative_error(&t, &y)?);
        }
        let m = errs.iter().sum::<f64>() / errs.len() as f64;
        (Some(errs), Some(m))
    } else {
        (None, None)
    };
    let test_params = (0..n_test).map(|i| test.grid.axes()[0].points.row(i).to_vec()).collect();
    let report = PredictReport { test_params, relative_errors, mean_relative_error, clamped_variances: clamped, files };
    write_json(&out.join("predict_report.json"), &report)?;
    Ok(report)
}

/// Error used when a training run aborts; maps to exit code 3.
pub fn aborted_error(reason: &str) -> KgpError {
    KgpError::Numerical(format!("training aborted: {reason}"))
}
