//! Scattered data onto a rectilinear lattice by inverse-distance weighting.
//! Lattice points with no source inside the stencil radius become gaps.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, val_err, Result};
use crate::gappy::GappyMask;
use crate::kronalg::FieldTensor;
use crate::linalg::DenseMatrix;

const NEIGHBOURS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatteredSnapshot {
    /// n × d.
    pub points: DenseMatrix,
    pub values: Vec<f64>,
}

impl ScatteredSnapshot {
    pub fn new(points: DenseMatrix, values: Vec<f64>) -> Result<Self> {
        if points.rows() != values.len() {
            return dim_err(format!("{} points but {} values", points.rows(), values.len()));
        }
        if points.data().iter().chain(&values).any(|v| !v.is_finite()) {
            return val_err("snapshot contains non-finite entries");
        }
        Ok(Self { points, values })
    }
}

/// Row-major enumeration of lattice coordinates.
pub fn lattice_coords(axes: &[Vec<f64>]) -> DenseMatrix {
    let d = axes.len();
    let n: usize = axes.iter().map(|a| a.len()).product();
    let mut data = Vec::with_capacity(n * d);
    let mut idx = vec![0usize; d];
    for _ in 0..n {
        for k in 0..d {
            data.push(axes[k][idx[k]]);
        }
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
    DenseMatrix::new(n, d, data).expect("lattice size")
}

/// IDW (power 2) from the 4 nearest sources within `radius`; ties broken by
/// source index. Gap entries hold NaN; the mask is authoritative.
pub fn embed_to_lattice(snap: &ScatteredSnapshot, axes: &[Vec<f64>], radius: f64) -> Result<(FieldTensor, GappyMask)> {
    let d = axes.len();
    if snap.points.cols() != d {
        return dim_err(format!("snapshot is {}-dimensional, lattice has {d} axes", snap.points.cols()));
    }
    if !(radius > 0.0) {
        return val_err("stencil radius must be positive");
    }
    for (k, ax) in axes.iter().enumerate() {
        if ax.is_empty() {
            return val_err(format!("lattice axis {k} is empty"));
        }
        let (lo, hi) = ax.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let tol = 1e-9 * (hi - lo).abs().max(1.0);
        let outside: Vec<usize> = (0..snap.points.rows())
            .filter(|&i| {
                let v = snap.points.get(i, k);
                v < lo - tol || v > hi + tol
            })
            .collect();
        if !outside.is_empty() {
            return val_err(format!("lattice does not cover source points along axis {k}: {outside:?}"));
        }
    }
    let lat = lattice_coords(axes);
    let r2max = radius * radius;
    let n = lat.rows();
    let mut values = vec![f64::NAN; n];
    let mut flags = vec![false; n];
    let mut near: Vec<(f64, usize)> = Vec::new();
    for (p, (val, flag)) in values.iter_mut().zip(flags.iter_mut()).enumerate() {
        let q = lat.row(p);
        near.clear();
        for s in 0..snap.points.rows() {
            let d2: f64 = snap.points.row(s).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= r2max {
                near.push((d2, s));
            }
        }
        if near.is_empty() {
            continue;
        }
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        *flag = true;
        if near[0].0 <= 1e-24 * r2max {
            *val = snap.values[near[0].1];
            continue;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for &(d2, s) in near.iter().take(NEIGHBOURS) {
            let w = 1.0 / d2;
            num += w * snap.values[s];
            den += w;
        }
        *val = num / den;
    }
    let shape: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let mask = GappyMask::from_flags(shape.clone(), &flags)?;
    Ok((FieldTensor::new(shape, values)?, mask))
}
