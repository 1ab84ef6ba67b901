//! Adam with optional global gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGrads, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Learning-rate multiplier over the course of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warmup over the first `warmup` fraction of steps, then cosine
    /// decay to zero.
    Cosine { warmup: f64 },
}

impl Schedule {
    /// Multiplier for 0-based `step` out of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { warmup } => {
                let total = total.max(1) as f64;
                let t = step as f64;
                let w = (warmup * total).floor();
                if t < w {
                    (t + 1.0) / (w + 1.0)
                } else {
                    let p = ((t - w) / (total - w).max(1.0)).min(1.0);
                    0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Cosine { warmup } if !(0.0..1.0).contains(warmup) => Err(Error::config("schedule.warmup", "must lie in [0, 1)")),
            _ => Ok(()),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1/beta2", "must lie in [0, 1)"));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::config("clip_norm", "must be nonnegative"));
        }
        Ok(())
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

pub fn grad_norm(grads: &ParamGrads) -> f64 {
    grads
        .values()
        .flat_map(|a| a.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Overrides the learning rate for subsequent steps.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update in place. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &ParamGrads) -> Result<f64> {
        let norm = grad_norm(grads);
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.cfg;
        for (name, param) in store.iter_mut() {
            let Some(g) = grads.get(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
