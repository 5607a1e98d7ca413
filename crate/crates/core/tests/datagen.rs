mod common;

use common::*;
use kgp::datagen::burgers::{burgers_solve, BurgersConfig};
use kgp::datagen::embed::{embed_to_lattice, lattice_coords, ScatteredSnapshot};
use kgp::datagen::maps::{apply_map, AnalyticMap, Direction};
use kgp::datagen::pca::pca_reduce;
use kgp::datagen::synth::{holed_square_snapshot, HoledSquare};
use kgp::datagen::{burgers_design, relative_error};
use kgp::linalg::DenseMatrix;
use nalgebra::DMatrix;
use rand::Rng;

/// Exact entropy solution for constant source s: steady branch
/// u² = μ₁² + 2sx behind the shock, u = 1 + st ahead of it, and a shock
/// moving at the mean of the two states (integrated with RK4).
fn exact_riemann_with_source(mu1: f64, s: f64, t_end: f64, x: &[f64]) -> Vec<f64> {
    let speed = |t: f64, xs: f64| 0.5 * ((mu1 * mu1 + 2.0 * s * xs).sqrt() + 1.0 + s * t);
    let steps = 20_000;
    let h = t_end / steps as f64;
    let (mut t, mut xs) = (0.0, 0.0);
    for _ in 0..steps {
        let k1 = speed(t, xs);
        let k2 = speed(t + h / 2.0, xs + h * k1 / 2.0);
        let k3 = speed(t + h / 2.0, xs + h * k2 / 2.0);
        let k4 = speed(t + h, xs + h * k3);
        xs += h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
        t += h;
    }
    x.iter().map(|&xi| if xi < xs { (mu1 * mu1 + 2.0 * s * xi).sqrt() } else { 1.0 + s * t_end }).collect()
}

fn l1_error(m: usize) -> f64 {
    let cfg = BurgersConfig { t_final: 20.0, mu2: 0.0, unchecked: true, ..BurgersConfig::new(4.5, 0.0, m, 2) };
    let sol = burgers_solve(&cfg).unwrap();
    let num: Vec<f64> = (0..m).map(|i| sol.field.values()[i * 2 + 1]).collect();
    let exact = exact_riemann_with_source(4.5, 0.02, 20.0, &sol.x);
    let dx = sol.x[1];
    let err: f64 = num[1..].iter().zip(&exact[1..]).map(|(a, b)| (a - b).abs()).sum::<f64>() * dx;
    let norm: f64 = exact[1..].iter().map(|v| v.abs()).sum::<f64>() * dx;
    err / norm
}

#[test]
fn burgers_converges_to_exact_shock_solution() {
    let errs: Vec<f64> = [65, 129, 257, 513].iter().map(|&m| l1_error(m)).collect();
    for w in errs.windows(2) {
        assert!(w[1] < 0.8 * w[0], "no first-order decay: {errs:?}");
    }
    assert!(errs[3] < 0.02, "{errs:?}");
}

#[test]
fn burgers_balance_holds_on_design() {
    for mu in burgers_design(4) {
        let sol = burgers_solve(&BurgersConfig::new(mu[0], mu[1], 128, 6)).unwrap();
        assert!(sol.max_balance_residual <= 1e-8, "{mu:?}: {}", sol.max_balance_residual);
        assert!(sol.field.values().iter().all(|v| v.is_finite() && *v >= 1.0 - 1e-12));
    }
}

#[test]
fn burgers_output_times_include_zero() {
    let cfg = BurgersConfig::new(5.0, 0.02, 16, 8);
    assert_eq!(cfg.t()[0], 0.0);
    assert!((cfg.t()[7] - 35.0).abs() < 1e-12);
}

#[test]
fn relative_error_is_per_snapshot_ratio() {
    assert_eq!(relative_error(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
    assert!((relative_error(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn embedding_on_coincident_points_is_exact() {
    let axes = vec![vec![0.0, 0.5, 1.0, 1.5], vec![-1.0, 0.0, 2.0]];
    let pts = lattice_coords(&axes);
    let vals: Vec<f64> = (0..pts.rows()).map(|i| 3.0 * pts.get(i, 0) - pts.get(i, 1) + 0.25).collect();
    let snap = ScatteredSnapshot::new(pts, vals.clone()).unwrap();
    let (field, mask) = embed_to_lattice(&snap, &axes, 0.3).unwrap();
    assert!(mask.gaps().is_empty());
    assert_eq!(field.values(), vals.as_slice());
}

#[test]
fn holed_square_gaps_match_geometry() {
    let geom = HoledSquare::default();
    let snap = holed_square_snapshot(&geom, &[2.0, 1.0]).unwrap();
    let n = 21;
    let axis: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let radius = 0.1;
    let spacing = 2.0 / (geom.samples_per_side - 1) as f64;
    let (field, mask) = embed_to_lattice(&snap, &[axis.clone(), axis.clone()], radius).unwrap();
    let gaps: std::collections::HashSet<usize> = mask.gaps().iter().copied().collect();
    let mut checked = 0;
    for i in 0..n {
        for j in 0..n {
            let d = axis[i].hypot(axis[j]);
            let idx = i * n + j;
            // Deep inside the hole no sample is within the radius; outside it
            // the fine grid always has one within a cell diagonal.
            if d < geom.hole_radius - radius {
                assert!(gaps.contains(&idx), "({}, {}) should be a gap", axis[i], axis[j]);
                assert!(field.values()[idx].is_nan());
                checked += 1;
            } else if d >= geom.hole_radius + spacing {
                assert!(!gaps.contains(&idx));
                checked += 1;
            }
        }
    }
    assert!(!gaps.is_empty() && checked > 400);
}

#[test]
fn maps_round_trip() {
    let mut r = rng(4);
    let annulus = AnalyticMap::Annulus { center: [0.5, -0.25], r_inner: 0.4, r_outer: 1.3 };
    let pts = DenseMatrix::from_fn(100, 2, |_, _| r.random_range(0.0..1.0));
    // Keep η away from the branch cut at 1 so θ ∈ [0, 2π) is unambiguous.
    let pts = DenseMatrix::from_fn(100, 2, |i, j| if j == 1 { 0.98 * pts.get(i, j) } else { pts.get(i, j) });
    let snap = ScatteredSnapshot::new(pts.clone(), vec![0.0; 100]).unwrap();
    let phys = apply_map(&annulus, &snap, Direction::Inverse).unwrap();
    let back = apply_map(&annulus, &phys, Direction::Forward).unwrap();
    assert!(back.points.sub(&pts).unwrap().max_abs() <= 1e-12);

    let a = DenseMatrix::new(2, 2, vec![2.0, 0.5, -0.3, 1.2]).unwrap();
    let affine = AnalyticMap::Affine { matrix: a, offset: vec![0.1, -3.0] };
    let fwd = apply_map(&affine, &snap, Direction::Forward).unwrap();
    let inv = apply_map(&affine, &fwd, Direction::Inverse).unwrap();
    assert!(inv.points.sub(&pts).unwrap().max_abs() <= 1e-12);
}

#[test]
fn map_rejects_points_outside_annulus() {
    let annulus = AnalyticMap::Annulus { center: [0.0, 0.0], r_inner: 0.4, r_outer: 1.0 };
    let snap = ScatteredSnapshot::new(DenseMatrix::new(2, 2, vec![0.7, 0.0, 0.1, 0.1]).unwrap(), vec![0.0; 2]).unwrap();
    let err = apply_map(&annulus, &snap, Direction::Forward).unwrap_err();
    assert!(err.to_string().contains("[1]"), "{err}");
}

#[test]
fn pca_full_rank_and_ordering() {
    let mut r = rng(9);
    let x = random_matrix(&mut r, 20, 10);
    let p = pca_reduce(&from_na(&x), 10).unwrap();
    assert!(p.reconstruct().sub(&from_na(&x)).unwrap().max_abs() <= 1e-12);
    assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    let centered = DMatrix::from_fn(20, 10, |i, j| x[(i, j)] - x.column(j).mean());
    let sv = sorted_desc(centered.singular_values().as_slice().to_vec());
    assert!(rel_inf(&p.singular_values, &sv) <= 1e-12);
    let k3 = pca_reduce(&from_na(&x), 3).unwrap();
    let resid = k3.reconstruct().sub(&from_na(&x)).unwrap().frobenius().powi(2) / 20.0;
    assert!((resid - k3.residual_variance()).abs() <= 1e-10 * resid);
}
