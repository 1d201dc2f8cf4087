use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Loss-weight schedule over a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub kl_start: f64,
    pub kl_end: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Fraction of the run over which alpha is log-annealed.
    pub alpha_ramp: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Decades of exponential decay of beta and gamma over the run.
    pub edge_decay_decades: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda_c: 10.0,
            lambda_p: 1.0,
            kl_start: 1e-6,
            kl_end: 1e-3,
            alpha_start: 1e-6,
            alpha_end: 1.0,
            alpha_ramp: 1.0 / 3.0,
            beta: 300.0,
            gamma: 250.0,
            edge_decay_decades: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub iteration: usize,
    pub total_iterations: usize,
    pub weights: LossWeights,
}

/// Geometric interpolation that returns the endpoints exactly.
fn log_interp(start: f64, end: f64, t: f64) -> f64 {
    if t <= 0.0 {
        start
    } else if t >= 1.0 {
        end
    } else {
        start * (end / start).powf(t)
    }
}

impl ScheduleConfig {
    pub fn weights_at(&self, iteration: usize, total: usize) -> Result<ScheduleState> {
        if total == 0 {
            return Err(Error::Config("schedule needs at least one iteration".into()));
        }
        if iteration > total {
            return Err(Error::Config(format!("iteration {iteration} beyond total {total}")));
        }
        let t = iteration as f64 / total as f64;
        let ramp = if self.alpha_ramp > 0.0 { (t / self.alpha_ramp).min(1.0) } else { 1.0 };
        let decay = if t == 0.0 { 1.0 } else { 10f64.powf(-self.edge_decay_decades * t) };
        Ok(ScheduleState {
            iteration,
            total_iterations: total,
            weights: LossWeights {
                chamfer: self.lambda_c,
                pixel: self.lambda_p,
                kl: log_interp(self.kl_start, self.kl_end, t),
                uniform: log_interp(self.alpha_start, self.alpha_end, ramp),
                elastic: self.beta * decay,
                curvature: self.gamma * decay,
            },
        })
    }
}

/// Default schedule at `iteration` of `total`.
pub fn schedule_weights(iteration: usize, total: usize) -> Result<ScheduleState> {
    ScheduleConfig::default().weights_at(iteration, total)
}
