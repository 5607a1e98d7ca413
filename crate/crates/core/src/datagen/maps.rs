//! Analytic maps from a parametrized physical domain to a fixed reference
//! domain. Only closed-form maps are supported; values are never touched.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::datagen::embed::ScatteredSnapshot;
use crate::error::{dim_err, val_err, Result};
use crate::linalg::{inverse, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum AnalyticMap {
    /// ξ = A x + b.
    Affine { matrix: DenseMatrix, offset: Vec<f64> },
    /// Annulus to the unit square: ξ = (r − r_in)/(r_out − r_in), η = θ/2π with
    /// θ ∈ [0, 2π). The corner (0, 0) is the point (r_in, 0) relative to center.
    Annulus { center: [f64; 2], r_inner: f64, r_outer: f64 },
}

const DOMAIN_TOL: f64 = 1e-12;

impl AnalyticMap {
    pub fn identity(d: usize) -> Self {
        AnalyticMap::Affine { matrix: DenseMatrix::identity(d), offset: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        match self {
            AnalyticMap::Affine { offset, .. } => offset.len(),
            AnalyticMap::Annulus { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AnalyticMap::Affine { matrix, offset } => {
                if !matrix.is_square() || matrix.rows() != offset.len() {
                    return dim_err(format!("affine map needs a square {0}x{0} matrix", offset.len()));
                }
            }
            AnalyticMap::Annulus { center, r_inner, r_outer } => {
                if !(0.0 < *r_inner && r_inner < r_outer) || !center.iter().all(|c| c.is_finite()) {
                    return val_err(format!("annulus needs 0 < r_inner < r_outer, got {r_inner}, {r_outer}"));
                }
            }
        }
        Ok(())
    }

    /// Maps one point, or `None` when it lies outside the map's domain.
    fn map_point(&self, p: &[f64], dir: Direction, inv: Option<&DenseMatrix>) -> Option<Vec<f64>> {
        match (self, dir) {
            (AnalyticMap::Affine { matrix, offset }, Direction::Forward) => {
                Some((0..offset.len()).map(|i| matrix.row(i).iter().zip(p).map(|(a, x)| a * x).sum::<f64>() + offset[i]).collect())
            }
            (AnalyticMap::Affine { offset, .. }, Direction::Inverse) => {
                let inv = inv.expect("affine inverse computed up front");
                let shifted: Vec<f64> = p.iter().zip(offset).map(|(x, b)| x - b).collect();
                Some((0..offset.len()).map(|i| inv.row(i).iter().zip(&shifted).map(|(a, x)| a * x).sum()).collect())
            }
            (AnalyticMap::Annulus { center, r_inner, r_outer }, Direction::Forward) => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let r = dx.hypot(dy);
                let w = r_outer - r_inner;
                if r < r_inner - DOMAIN_TOL * w || r > r_outer + DOMAIN_TOL * w {
                    return None;
                }
                let mut theta = dy.atan2(dx);
                if theta < 0.0 {
                    theta += TAU;
                }
                Some(vec![((r - r_inner) / w).clamp(0.0, 1.0), theta / TAU])
            }
            (AnalyticMap::Annulus { center, r_inner, r_outer }, Direction::Inverse) => {
                let (xi, eta) = (p[0], p[1]);
                if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&xi) || !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&eta) {
                    return None;
                }
                let r = r_inner + xi * (r_outer - r_inner);
                let theta = eta * TAU;
                Some(vec![center[0] + r * theta.cos(), center[1] + r * theta.sin()])
            }
        }
    }
}

/// Transforms snapshot coordinates; values pass through unchanged.
pub fn apply_map(map: &AnalyticMap, snap: &ScatteredSnapshot, dir: Direction) -> Result<ScatteredSnapshot> {
    map.validate()?;
    let d = map.dim();
    if snap.points.cols() != d {
        return dim_err(format!("map is {d}-dimensional but points have {} columns", snap.points.cols()));
    }
    let inv = match (map, dir) {
        (AnalyticMap::Affine { matrix, .. }, Direction::Inverse) => Some(inverse(matrix)?),
        _ => None,
    };
    let n = snap.points.rows();
    let mut data = Vec::with_capacity(n * d);
    let mut outside = Vec::new();
    for i in 0..n {
        match map.map_point(snap.points.row(i), dir, inv.as_ref()) {
            Some(q) => data.extend(q),
            None => {
                outside.push(i);
                data.extend(std::iter::repeat_n(0.0, d));
            }
        }
    }
    if !outside.is_empty() {
        return val_err(format!("points outside the map domain: {outside:?}"));
    }
    ScatteredSnapshot::new(DenseMatrix::new(n, d, data)?, snap.values.clone())
}
