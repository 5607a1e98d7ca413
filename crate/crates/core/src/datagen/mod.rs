//! Desk-scale data: Burgers snapshots, synthetic holed-domain fields,
//! embedding, analytic maps, PCA and the error metric.

pub mod burgers;
pub mod embed;
pub mod maps;
pub mod pca;
pub mod sobol;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{dim_err, val_err, Result};
use crate::grid::{Axis, AxisRole, ProductGrid};
use crate::kernels::{product_covariance, ProductKernelSpec};
use crate::kronalg::{eig_factors, FieldTensor};
use crate::linalg::DenseMatrix;

pub use burgers::{burgers_solve, BurgersConfig, BurgersSolution, MU1_RANGE, MU2_RANGE};
pub use embed::{embed_to_lattice, lattice_coords, ScatteredSnapshot};
pub use maps::{apply_map, AnalyticMap, Direction};
pub use pca::{pca_reduce, Pca};

/// Held-out parameters for the Burgers study.
pub const BURGERS_TEST_PARAMS: [[f64; 2]; 2] = [[4.3, 0.021], [5.15, 0.0285]];

/// ‖truth − pred‖₂ / ‖truth‖₂.
pub fn relative_error(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return dim_err(format!("truth has {} entries, prediction {}", truth.len(), pred.len()));
    }
    let nt = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(nt > 0.0) {
        return val_err("relative error undefined for a zero-norm truth");
    }
    let d = truth.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(d / nt)
}

/// First `n` points of the 2D Sobol sequence (origin skipped) scaled to the
/// Burgers parameter box.
pub fn burgers_design(n: usize) -> Vec<[f64; 2]> {
    sobol::sobol_2d(n, 1)
        .into_iter()
        .map(|[a, b]| [MU1_RANGE.0 + a * (MU1_RANGE.1 - MU1_RANGE.0), MU2_RANGE.0 + b * (MU2_RANGE.1 - MU2_RANGE.0)])
        .collect()
}

/// Solves every parameter in parallel and stacks the fields into an
/// N × M × N_t tensor on the matching (μ, x, t) grid.
pub fn burgers_dataset(params: &[[f64; 2]], m: usize, nt: usize, t_final: f64) -> Result<(ProductGrid, FieldTensor)> {
    if params.is_empty() {
        return val_err("dataset needs at least one parameter");
    }
    let sols: Vec<BurgersSolution> = params
        .par_iter()
        .map(|&[mu1, mu2]| {
            let mut cfg = BurgersConfig::new(mu1, mu2, m, nt);
            cfg.t_final = t_final;
            burgers_solve(&cfg)
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(params.len() * m * nt);
    for s in &sols {
        values.extend_from_slice(s.field.values());
    }
    let mu = DenseMatrix::new(params.len(), 2, params.iter().flatten().copied().collect())?;
    let grid = ProductGrid::new(vec![
        Axis::new(AxisRole::Parameter, mu),
        Axis::line(AxisRole::Spatial, &sols[0].x),
        Axis::line(AxisRole::Temporal, &sols[0].t),
    ])?;
    Ok((grid, FieldTensor::new(vec![params.len(), m, nt], values)?))
}

/// One draw of y = f + ε with f ~ GP(0, K_Z) and ε ~ N(0, σ²I), using the
/// (jittered) factor eigendecompositions: y = U·diag(√(λ+σ²))·z.
pub fn prior_sample(spec: &ProductKernelSpec, grid: &ProductGrid, sigma2: f64, jitter: f64, seed: u64) -> Result<FieldTensor> {
    if !(sigma2 >= 0.0) {
        return val_err("noise variance must be non-negative");
    }
    let eig = eig_factors(&product_covariance(spec, grid)?, jitter)?;
    let lam = eig.eigenvalue_tensor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = lam
        .values()
        .iter()
        .map(|&l| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * (l.max(0.0) + sigma2).sqrt()
        })
        .collect();
    eig.backward(&FieldTensor::new(lam.shape().to_vec(), z)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_closed_forms() {
        let t = [1.0, -2.0, 3.0];
        assert_eq!(relative_error(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_error(&t, &[0.0; 3]).unwrap(), 1.0);
        let p: Vec<f64> = t.iter().map(|v| 1.01 * v).collect();
        assert!((relative_error(&t, &p).unwrap() - 0.01).abs() < 1e-14);
        assert!(relative_error(&[0.0; 3], &t).is_err());
        assert!(relative_error(&t, &t[..2]).is_err());
    }

    #[test]
    fn design_stays_in_box() {
        for [a, b] in burgers_design(20) {
            assert!((MU1_RANGE.0..=MU1_RANGE.1).contains(&a));
            assert!((MU2_RANGE.0..=MU2_RANGE.1).contains(&b));
        }
    }

    #[test]
    fn dataset_shape_and_layout() {
        let p = burgers_design(2);
        let (grid, y) = burgers_dataset(&p, 16, 8, 35.0).unwrap();
        assert_eq!(grid.shape(), vec![2, 16, 8]);
        // boundary node of the second snapshot at the last time is μ₁.
        assert_eq!(y.values()[16 * 8 + 7], p[1][0]);
    }
}
