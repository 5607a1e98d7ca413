//! Synthetic 2D fields on a square with a circular hole. The hole is what
//! produces gaps once the scattered samples are embedded on a square lattice.

use serde::{Deserialize, Serialize};

use crate::datagen::embed::ScatteredSnapshot;
use crate::error::{val_err, Result};
use crate::linalg::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoledSquare {
    /// Half-width of the square centered at the origin.
    pub half_width: f64,
    pub hole_radius: f64,
    /// Source samples per side of the fine sampling grid.
    pub samples_per_side: usize,
}

impl Default for HoledSquare {
    fn default() -> Self {
        Self { half_width: 1.0, hole_radius: 0.4, samples_per_side: 61 }
    }
}

impl HoledSquare {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.hole_radius > 0.0 && self.hole_radius < self.half_width) {
            return val_err("hole radius must lie in (0, half_width)");
        }
        if self.samples_per_side < 2 {
            return val_err("need at least 2 samples per side");
        }
        Ok(())
    }

    pub fn in_hole(&self, x: f64, y: f64) -> bool {
        x.hypot(y) < self.hole_radius
    }
}

/// Smooth two-parameter field; μ₁ sets the bump width, μ₂ the wavenumber.
pub fn synthetic_field(mu: &[f64], x: f64, y: f64) -> f64 {
    let (a, k) = (mu[0], mu[1]);
    (-a * ((x - 0.3) * (x - 0.3) + y * y)).exp() * (k * std::f64::consts::PI * x).cos() + 0.5 * y
}

/// Samples the field on a uniform fine grid, dropping points inside the hole.
pub fn holed_square_snapshot(geom: &HoledSquare, mu: &[f64]) -> Result<ScatteredSnapshot> {
    geom.validate()?;
    if mu.len() != 2 {
        return val_err(format!("synthetic field takes 2 parameters, got {}", mu.len()));
    }
    let n = geom.samples_per_side;
    let h = 2.0 * geom.half_width / (n - 1) as f64;
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (-geom.half_width + i as f64 * h, -geom.half_width + j as f64 * h);
            if geom.in_hole(x, y) {
                continue;
            }
            pts.extend([x, y]);
            vals.push(synthetic_field(mu, x, y));
        }
    }
    ScatteredSnapshot::new(DenseMatrix::new(vals.len(), 2, pts)?, vals)
}
