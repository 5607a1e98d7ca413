//! Wall-clock scaling of the structured NLML and prediction against the dense
//! oracle as the spatial lattice doubles.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dense::{dense_nlml, DenseGP};
use crate::error::{val_err, Result};
use crate::grid::{fit, grid_nlml, predict_mean, predict_var, Axis, AxisRole, ProductGrid, DEFAULT_JITTER};
use crate::kernels::{FactorKernel, KernelFamily, ProductKernelSpec};
use crate::kronalg::FieldTensor;
use crate::linalg::DenseMatrix;

pub const BENCH_PARAMS: usize = 4;
pub const BENCH_TIMES: usize = 8;
pub const DEFAULT_SIZES: [usize; 7] = [64, 128, 256, 512, 1024, 2048, 4096];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    /// Spatial axes sharing the M points (1 or 2).
    pub dims: usize,
    /// Largest lattice the dense oracle is timed on.
    pub dense_cap: usize,
    /// Repetitions for sub-second timings; the minimum is reported.
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { dims: 1, dense_cap: 4096, repeats: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: usize,
    pub n_total: usize,
    pub grid_nlml_s: f64,
    /// t(M)/t(previous M); empty on the first row.
    pub grid_ratio: Option<f64>,
    pub predict_s: f64,
    pub predict_ratio: Option<f64>,
    pub dense_nlml_s: Option<f64>,
    pub dense_ratio: Option<f64>,
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
    let mut s = String::from("m,n_total,grid_nlml_s,grid_ratio,predict_s,predict_ratio,dense_nlml_s,dense_ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6e},{},{:.6e},{},{},{}\n",
            r.m,
            r.n_total,
            r.grid_nlml_s,
            f(r.grid_ratio),
            r.predict_s,
            f(r.predict_ratio),
            f(r.dense_nlml_s),
            f(r.dense_ratio)
        ));
    }
    s
}

fn linspace(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n.max(2) - 1) as f64).collect()
}

/// Splits M into `dims` axis lengths as evenly as powers of two allow.
fn spatial_split(m: usize, dims: usize) -> Vec<usize> {
    match dims {
        1 => vec![m],
        _ => {
            let mut a = 1;
            while a * a < m {
                a *= 2;
            }
            vec![a, m.div_ceil(a)]
        }
    }
}

pub fn bench_grid(m: usize, dims: usize) -> Result<(ProductKernelSpec, ProductGrid)> {
    let mut axes = vec![Axis::line(AxisRole::Parameter, &linspace(BENCH_PARAMS))];
    for n in spatial_split(m, dims) {
        axes.push(Axis::line(AxisRole::Spatial, &linspace(n)));
    }
    axes.push(Axis::line(AxisRole::Temporal, &linspace(BENCH_TIMES)));
    let grid = ProductGrid::new(axes)?;
    let factors = (0..grid.axes().len())
        .map(|k| FactorKernel::stationary(KernelFamily::Matern52, &[0.3], if k == 0 { 1.5 } else { 1.0 }))
        .collect::<Result<Vec<_>>>()?;
    Ok((ProductKernelSpec::new(factors)?, grid))
}

fn time_min(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for r in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        let s = t.elapsed().as_secs_f64();
        best = best.min(s);
        // Long runs are stable enough from one sample.
        if r == 0 && s > 1.0 {
            break;
        }
    }
    Ok(best)
}

fn smooth_targets(grid: &ProductGrid) -> FieldTensor {
    let pts = grid.lattice_points();
    let v = (0..pts.rows()).map(|i| pts.row(i).iter().enumerate().map(|(j, x)| ((j + 1) as f64 * x).sin()).sum()).collect();
    FieldTensor::new(grid.shape(), v).expect("lattice shape")
}

pub fn run_bench(sizes: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || sizes.iter().any(|&m| m < 2) {
        return val_err("bench sizes must be at least 2");
    }
    if !(1..=2).contains(&opts.dims) {
        return val_err("bench supports 1 or 2 spatial dimensions");
    }
    let sigma2 = 1e-2;
    let mut rows: Vec<BenchRow> = Vec::with_capacity(sizes.len());
    for &m in sizes {
        let (spec, grid) = bench_grid(m, opts.dims)?;
        let y = smooth_targets(&grid);
        let grid_nlml_s = time_min(opts.repeats, || grid_nlml(&spec, &grid, &y, sigma2).map(|_| ()))?;
        let model = fit(&spec, &grid, &y, sigma2)?;
        let test = grid.with_param_points(DenseMatrix::column(&[0.37]))?;
        let predict_s = time_min(opts.repeats, || {
            predict_mean(&model, &test)?;
            predict_var(&model, &test)?;
            Ok(())
        })?;
        let n_total = grid.len();
        let dense_nlml_s = if n_total <= opts.dense_cap {
            let gp = DenseGP::new_capped(grid.lattice_points(), y.values().to_vec(), spec.clone(), grid.factor_dims(), sigma2, DEFAULT_JITTER, opts.dense_cap)?;
            Some(time_min(1, || dense_nlml(&gp).map(|_| ()))?)
        } else {
            None
        };
        let prev = rows.last();
        let ratio = |now: f64, before: Option<f64>| before.map(|b| now / b);
        rows.push(BenchRow {
            m,
            n_total,
            grid_nlml_s,
            grid_ratio: ratio(grid_nlml_s, prev.map(|p| p.grid_nlml_s)),
            predict_s,
            predict_ratio: ratio(predict_s, prev.map(|p| p.predict_s)),
            dense_nlml_s,
            dense_ratio: match (dense_nlml_s, prev.and_then(|p| p.dense_nlml_s)) {
                (Some(a), Some(b)) => Some(a / b),
                _ => None,
            },
        });
    }
    Ok(rows)
}

pub fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| crate::error::KgpError::Validation(format!("bad size {t:?}"))))
        .collect()
}
