//! Bias-corrected Adam with per-Gaussian moment buffers and step counters.

use std::collections::HashMap;

use crate::gaussians::{ParamArray, NUM_PARAMS};
use crate::hierarchy::GaussianId;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Moments for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<const N: usize> {
    pub m: [f64; N],
    pub v: [f64; N],
    pub step: u64,
}

impl<const N: usize> Default for AdamState<N> {
    fn default() -> Self {
        AdamState {
            m: [0.0; N],
            v: [0.0; N],
            step: 0,
        }
    }
}

/// One Adam update of `params` in place. `lr[i]` is the rate of entry `i`.
pub fn adam_step<const N: usize>(
    params: &mut [f64; N],
    grads: &[f64; N],
    state: &mut AdamState<N>,
    lr: &[f64; N],
    cfg: &AdamConfig,
) {
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step.min(i32::MAX as u64) as i32);
    for i in 0..N {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr[i] * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Adam state keyed by Gaussian id. Only Gaussians that receive an update
/// allocate or advance state.
#[derive(Clone, Debug, Default)]
pub struct SparseAdam {
    pub config: AdamConfig,
    states: HashMap<GaussianId, AdamState<NUM_PARAMS>>,
}

impl SparseAdam {
    pub fn new(config: AdamConfig) -> Self {
        SparseAdam {
            config,
            states: HashMap::new(),
        }
    }

    pub fn step(&mut self, id: GaussianId, params: &mut ParamArray, grads: &ParamArray, lr: &ParamArray) {
        let state = self.states.entry(id).or_default();
        adam_step(params, grads, state, lr, &self.config);
    }

    pub fn state(&self, id: GaussianId) -> Option<&AdamState<NUM_PARAMS>> {
        self.states.get(&id)
    }

    pub fn forget(&mut self, id: GaussianId) {
        self.states.remove(&id);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [1.0, -2.0, 3.5];
        let mut s = AdamState::default();
        adam_step(&mut p, &[0.0; 3], &mut s, &[0.1; 3], &AdamConfig::default());
        assert_eq!(p, [1.0, -2.0, 3.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = [0.0];
        let mut s = AdamState::default();
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[1.0], &mut s, &[0.1], &cfg);
        assert!((p[0] + 0.1 / (1.0 + cfg.epsilon)).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_trajectory() {
        // Reference: textbook Adam written out with explicit powers.
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let cfg = AdamConfig::default();
        let mut p = [0.4];
        let mut s = AdamState::default();
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 0.4f64);
        for (k, &g) in grads.iter().enumerate() {
            adam_step(&mut p, &[g], &mut s, &[0.01], &cfg);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = (k + 1) as i32;
            q -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-15);
            assert!((p[0] - q).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut opt = SparseAdam::default();
            let mut p = [0.5; NUM_PARAMS];
            for k in 0..50 {
                let mut g = [0.0; NUM_PARAMS];
                for (i, v) in g.iter_mut().enumerate() {
                    *v = ((i * 31 + k * 7) % 13) as f64 / 13.0 - 0.4;
                }
                opt.step(GaussianId(k as u64 % 3), &mut p, &g, &[1e-3; NUM_PARAMS]);
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn step_counters_are_per_gaussian() {
        let mut opt = SparseAdam::default();
        let mut p = [0.0; NUM_PARAMS];
        let g = [1.0; NUM_PARAMS];
        let lr = [1e-3; NUM_PARAMS];
        opt.step(GaussianId(1), &mut p, &g, &lr);
        opt.step(GaussianId(1), &mut p, &g, &lr);
        opt.step(GaussianId(2), &mut p, &g, &lr);
        assert_eq!(opt.state(GaussianId(1)).unwrap().step, 2);
        assert_eq!(opt.state(GaussianId(2)).unwrap().step, 1);
        assert!(opt.state(GaussianId(3)).is_none());
        opt.forget(GaussianId(1));
        assert_eq!(opt.len(), 1);
    }
}
