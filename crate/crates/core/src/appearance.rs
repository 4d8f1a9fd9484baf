//! Sparse view-dependent appearance.
//!
//! Residual SH coefficients start at exactly zero. A diffuse Gaussian only
//! receives residual updates once its residual gradient norm reaches `g_th`;
//! when the view-dependent share of the population reaches `lambda_h` the
//! threshold is raised to infinity for good.

use crate::error::{Error, Result};
use crate::hierarchy::{GaussianId, Hierarchy};
use crate::sh::RESIDUAL_LEN;

pub const DEFAULT_GRADIENT_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_RATIO_CUTOFF: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppearanceGate {
    g_th: f64,
    lambda_h: f64,
    frozen: bool,
}

impl Default for AppearanceGate {
    fn default() -> Self {
        AppearanceGate {
            g_th: DEFAULT_GRADIENT_THRESHOLD,
            lambda_h: DEFAULT_RATIO_CUTOFF,
            frozen: false,
        }
    }
}

impl AppearanceGate {
    /// `g_th` may be `+inf`; `lambda_h` must lie in `[0, 1]`.
    pub fn new(g_th: f64, lambda_h: f64) -> Result<Self> {
        if !(g_th >= 0.0) {
            return Err(Error::invalid("g_th", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&lambda_h) {
            return Err(Error::invalid("lambda_h", "must lie in [0, 1]"));
        }
        Ok(AppearanceGate {
            g_th,
            lambda_h,
            frozen: g_th == f64::INFINITY,
        })
    }

    pub fn g_th(&self) -> f64 {
        self.g_th
    }

    pub fn lambda_h(&self) -> f64 {
        self.lambda_h
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Whether a Gaussian with residual `h` may receive gradient `g_h`.
    pub fn admits(&self, h: &[f64; RESIDUAL_LEN], g_h: &[f64; RESIDUAL_LEN]) -> bool {
        if h.iter().any(|&v| v != 0.0) {
            return true;
        }
        norm(g_h) >= self.g_th
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Zeroes `g_h` in place when the gate rejects it. Returns whether it passed.
pub fn gate_gradients(h: &[f64; RESIDUAL_LEN], g_h: &mut [f64; RESIDUAL_LEN], gate: &AppearanceGate) -> bool {
    let pass = gate.admits(h, g_h);
    if !pass {
        *g_h = [0.0; RESIDUAL_LEN];
    }
    pass
}

/// Freezes the gate once `view_dependent / population >= lambda_h`.
pub fn update_ratio_cutoff(view_dependent: usize, population: usize, gate: &AppearanceGate) -> Result<AppearanceGate> {
    if population == 0 {
        return Err(Error::invalid("population", "must be nonempty"));
    }
    if gate.frozen {
        return Ok(*gate);
    }
    let fraction = view_dependent as f64 / population as f64;
    if fraction >= gate.lambda_h {
        return Ok(AppearanceGate {
            g_th: f64::INFINITY,
            lambda_h: gate.lambda_h,
            frozen: true,
        });
    }
    Ok(*gate)
}

/// Fraction of stored Gaussians with a nonzero residual.
pub fn view_dependent_fraction(h: &Hierarchy) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    h.iter().filter(|(_, g)| !g.is_diffuse()).count() as f64 / h.len() as f64
}

/// Splits ids into (diffuse, view-dependent), each ascending.
pub fn group_by_appearance<'a, I>(population: I) -> (Vec<GaussianId>, Vec<GaussianId>)
where
    I: IntoIterator<Item = (GaussianId, &'a crate::gaussians::Gaussian4D)>,
{
    let mut diffuse = Vec::new();
    let mut view_dependent = Vec::new();
    for (id, g) in population {
        if g.is_diffuse() {
            diffuse.push(id);
        } else {
            view_dependent.push(id);
        }
    }
    diffuse.sort_unstable();
    view_dependent.sort_unstable();
    (diffuse, view_dependent)
}
