//! First-order Godunov finite volumes for u_t + (u²/2)_x = 0.02·exp(μ₂x) on
//! [0, x_max] with u(0,t) = μ₁ and u(x,0) = 1.
//!
//! Output node 0 sits on the inflow boundary; nodes 1..M−1 are cell centers
//! of width dx = x_max/(M−1). Column 0 of the output is t = 0.

use serde::{Deserialize, Serialize};

use crate::error::{num_err, val_err, Result};
use crate::kronalg::FieldTensor;

pub const MU1_RANGE: (f64, f64) = (4.25, 5.5);
pub const MU2_RANGE: (f64, f64) = (0.015, 0.03);
const MAX_HALVINGS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub m: usize,
    pub nt: usize,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default = "default_x_max")]
    pub x_max: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Skip the parameter-box check (used by analytic tests with μ₂ = 0).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unchecked: bool,
}

fn default_t_final() -> f64 {
    35.0
}

fn default_x_max() -> f64 {
    100.0
}

fn default_dt() -> f64 {
    0.07
}

impl BurgersConfig {
    pub fn new(mu1: f64, mu2: f64, m: usize, nt: usize) -> Self {
        Self { mu1, mu2, m, nt, t_final: default_t_final(), x_max: default_x_max(), dt: default_dt(), unchecked: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.unchecked {
            if !(MU1_RANGE.0..=MU1_RANGE.1).contains(&self.mu1) {
                return val_err(format!("mu1 = {} outside [{}, {}]", self.mu1, MU1_RANGE.0, MU1_RANGE.1));
            }
            if !(MU2_RANGE.0..=MU2_RANGE.1).contains(&self.mu2) {
                return val_err(format!("mu2 = {} outside [{}, {}]", self.mu2, MU2_RANGE.0, MU2_RANGE.1));
            }
        }
        if self.m < 3 || self.nt < 1 {
            return val_err("need at least 3 spatial nodes and 1 output time");
        }
        if !(self.t_final > 0.0 && self.x_max > 0.0 && self.dt > 0.0) {
            return val_err("t_final, x_max and dt must be positive");
        }
        Ok(())
    }

    pub fn x(&self) -> Vec<f64> {
        let dx = self.x_max / (self.m - 1) as f64;
        (0..self.m).map(|i| i as f64 * dx).collect()
    }

    pub fn t(&self) -> Vec<f64> {
        if self.nt == 1 {
            return vec![0.0];
        }
        (0..self.nt).map(|j| self.t_final * j as f64 / (self.nt - 1) as f64).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BurgersSolution {
    /// M × N_t.
    pub field: FieldTensor,
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub steps: usize,
    /// Total CFL halvings over the run.
    pub halvings: usize,
    /// max over steps of |Δ∫u − boundary flux − source| / |∫u|.
    pub max_balance_residual: f64,
}

#[inline]
fn flux(u: f64) -> f64 {
    0.5 * u * u
}

/// Exact Riemann flux for the convex flux u²/2.
#[inline]
pub fn godunov_flux(ul: f64, ur: f64) -> f64 {
    if ul <= ur {
        if ul > 0.0 {
            flux(ul)
        } else if ur < 0.0 {
            flux(ur)
        } else {
            0.0
        }
    } else {
        flux(ul).max(flux(ur))
    }
}

pub fn burgers_solve(cfg: &BurgersConfig) -> Result<BurgersSolution> {
    cfg.validate()?;
    let m = cfg.m;
    let x = cfg.x();
    let times = cfg.t();
    let dx = cfg.x_max / (m - 1) as f64;
    let source: Vec<f64> = x.iter().map(|&xi| 0.02 * (cfg.mu2 * xi).exp()).collect();
    let source_sum: f64 = source[1..].iter().sum();

    // u[0] is the boundary value; cells are 1..m.
    let mut u = vec![1.0; m];
    let mut out = vec![0.0; m * cfg.nt];
    for i in 0..m {
        out[i * cfg.nt] = 1.0;
    }
    let mut fl = vec![0.0; m];
    let mut t = 0.0;
    let mut steps = 0;
    let mut halvings = 0;
    let mut max_res = 0.0_f64;
    for (j, &tj) in times.iter().enumerate().skip(1) {
        u[0] = cfg.mu1;
        while tj - t > 1e-12 * cfg.t_final {
            let umax = u.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let mut dt = cfg.dt.min(tj - t);
            let mut h = 0;
            while dt * umax > dx {
                dt *= 0.5;
                h += 1;
                if h > MAX_HALVINGS {
                    return num_err(format!("CFL condition still violated after {MAX_HALVINGS} halvings (max |u| = {umax:.3})"));
                }
            }
            halvings += h;
            // fl[i] = flux through the left face of cell i; fl[0] unused.
            for i in 1..m {
                fl[i] = godunov_flux(u[i - 1], u[i]);
            }
            let outflow = flux(u[m - 1]);
            let before: f64 = u[1..].iter().sum::<f64>() * dx;
            let r = dt / dx;
            for i in 1..m {
                let right = if i + 1 < m { fl[i + 1] } else { outflow };
                u[i] += -r * (right - fl[i]) + dt * source[i];
            }
            let after: f64 = u[1..].iter().sum::<f64>() * dx;
            let expected = dt * (fl[1] - outflow) + dt * dx * source_sum;
            let res = ((after - before) - expected).abs() / after.abs().max(f64::MIN_POSITIVE);
            max_res = max_res.max(res);
            t += dt;
            steps += 1;
        }
        t = tj;
        if u.iter().any(|v| !v.is_finite()) {
            return num_err(format!("solution became non-finite before t = {tj}"));
        }
        for i in 0..m {
            out[i * cfg.nt + j] = u[i];
        }
    }
    Ok(BurgersSolution {
        field: FieldTensor::new(vec![m, cfg.nt], out)?,
        x,
        t: times,
        steps,
        halvings,
        max_balance_residual: max_res,
    })
}
