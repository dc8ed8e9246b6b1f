//! Adaptive-moment optimiser with bias correction.

use serde::{Deserialize, Serialize};

use super::{Gradients, NetworkParams, N_PARAMS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: vec![0.0; N_PARAMS],
            second: vec![0.0; N_PARAMS],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients) {
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let p = params.as_mut_slice();
        for i in 0..N_PARAMS {
            let g = grads.as_slice()[i];
            self.first[i] = b1 * self.first[i] + (1.0 - b1) * g;
            self.second[i] = b2 * self.second[i] + (1.0 - b2) * g * g;
            let m = self.first[i] / c1;
            let v = self.second[i] / c2;
            p[i] -= lr * m / (v.sqrt() + eps);
        }
    }
}

/// One optimiser update.
pub fn step(params: &mut NetworkParams, grads: &Gradients, state: &mut AdamState) {
    state.step(params, grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = init_params(1);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            step(&mut p, &NetworkParams::zeros(), &mut s);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let cfg = AdamConfig::default();
        let mut p = NetworkParams::zeros();
        let g: Vec<f64> = (0..N_PARAMS).map(|i| ((i % 13) as f64 - 6.0) * 0.37).collect();
        let g = NetworkParams::from_vec(g).unwrap();
        let mut s = AdamState::new(cfg);
        step(&mut p, &g, &mut s);
        for (pi, gi) in p.as_slice().iter().zip(g.as_slice()) {
            // closed form: -lr * g / (|g| + eps)
            let expected = -cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
        }
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut p = init_params(9);
            let mut s = AdamState::new(AdamConfig::default());
            for k in 0..5 {
                let g = NetworkParams::from_vec(p.as_slice().iter().map(|v| v * (k as f64 + 1.0)).collect()).unwrap();
                step(&mut p, &g, &mut s);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
