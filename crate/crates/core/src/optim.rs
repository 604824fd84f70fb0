//! SGD with Nesterov momentum, the warm-up/cosine learning-rate schedule and
//! the EMA shadow copy of the parameters used for evaluation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MlpParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub eta0: f64,
    /// Total number of steps `K`.
    pub total_steps: usize,
    /// Warm-up length `K_p`.
    pub warmup_steps: usize,
    pub gamma: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            eta0: 0.03,
            total_steps: 20_000,
            warmup_steps: 2_000,
            gamma: 5.0 / 8.0,
        }
    }
}

impl Schedule {
    /// `K_p == K` is accepted: the whole run is warm-up.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!(
                "eta0 must be positive, got {}",
                self.eta0
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "K_p ({}) exceeds K ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0,1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn in_warmup(&self, k: usize) -> bool {
        k < self.warmup_steps
    }

    pub fn lr(&self, k: usize) -> Result<f64> {
        if k > self.total_steps {
            return Err(Error::InvalidInput(format!(
                "step {k} beyond K = {}",
                self.total_steps
            )));
        }
        if k < self.warmup_steps {
            return Ok(self.eta0);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        if span == 0.0 {
            return Ok(self.eta0);
        }
        let phase = self.gamma * PI * (k - self.warmup_steps) as f64 / (2.0 * span);
        Ok(self.eta0 * phase.cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: MlpParams,
    pub momentum: f64,
    pub ema_params: MlpParams,
    pub ema_momentum: f64,
}

impl OptimizerState {
    /// Zero velocity; the shadow starts as a copy of `params`.
    pub fn new(params: &MlpParams, momentum: f64, ema_momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {momentum}"
            )));
        }
        if !(0.0..=1.0).contains(&ema_momentum) {
            return Err(Error::Config(format!(
                "EMA momentum must lie in [0,1], got {ema_momentum}"
            )));
        }
        Ok(Self {
            velocity: params.zeros_like(),
            momentum,
            ema_params: params.clone(),
            ema_momentum,
        })
    }
}

/// `v ← m v + g; θ ← θ − lr (m v + g)`. A non-finite gradient is rejected
/// before anything is modified.
pub fn sgd_step(
    params: &mut MlpParams,
    grads: &MlpParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.velocity) {
        return Err(Error::InvalidInput(
            "sgd_step: parameter, gradient and velocity shapes differ".into(),
        ));
    }
    if let Some(i) = grads.values().iter().position(|g| !g.is_finite()) {
        let block = grads
            .layout()
            .blocks
            .iter()
            .find(|b| b.range().contains(&i))
            .map(|b| b.name.clone())
            .unwrap_or_default();
        return Err(Error::Numerical(format!(
            "non-finite gradient at index {i} ({block}): {}",
            grads.values()[i]
        )));
    }
    let m = state.momentum;
    for ((theta, v), g) in params
        .values_mut()
        .iter_mut()
        .zip(state.velocity.values_mut())
        .zip(grads.values())
    {
        *v = m * *v + g;
        *theta -= lr * (m * *v + g);
    }
    Ok(())
}

/// `shadow ← a·shadow + (1−a)·params`.
pub fn ema_update(state: &mut OptimizerState, params: &MlpParams) -> Result<()> {
    if !params.same_shape(&state.ema_params) {
        return Err(Error::InvalidInput("ema_update: shape mismatch".into()));
    }
    let a = state.ema_momentum;
    for (s, p) in state
        .ema_params
        .values_mut()
        .iter_mut()
        .zip(params.values())
    {
        *s = a * *s + (1.0 - a) * p;
    }
    Ok(())
}
