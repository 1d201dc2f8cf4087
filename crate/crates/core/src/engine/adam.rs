use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates mirroring the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any
/// parameter is touched.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::Shape("gradient layout does not match parameters".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of parameter {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .blocks
        .iter_mut()
        .zip(&grads.blocks)
        .zip(&mut state.m.blocks)
        .zip(&mut state.v.blocks)
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m.data[i] / c1;
            let vh = v.data[i] / c2;
            p.data[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Adam over a flat coordinate vector, used by direct contour fitting.
#[derive(Debug, Clone)]
pub struct VecAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    pub cfg: AdamConfig,
}

impl VecAdam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            cfg,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.step);
        let c2 = 1.0 - self.cfg.beta2.powi(self.step);
        for i in 0..x.len() {
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g[i];
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
            x[i] -= self.cfg.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.cfg.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Params {
        let mut p = Params::default();
        p.push("w", &[1], vec![v]);
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar(0.0), &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.blocks[0].data[0], 0.7);
    }

    #[test]
    fn first_step_is_learning_rate() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar(1.0), &mut s, &AdamConfig::default()).unwrap();
        // bias correction makes m_hat = v_hat = 1; eps shifts the step by ~1e-12
        assert!((p.blocks[0].data[0] + 1e-4).abs() < 2e-12);
        adam_step(&mut p, &scalar(1.0), &mut s, &AdamConfig::default()).unwrap();
        assert!((p.blocks[0].data[0] + 2e-4).abs() < 4e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p.blocks[0].data[0], 0.0);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = scalar(1.0);
            let mut s = AdamState::new(&p);
            for k in 0..50 {
                let g = scalar((k as f64 * 0.37).sin() + p.blocks[0].data[0]);
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
