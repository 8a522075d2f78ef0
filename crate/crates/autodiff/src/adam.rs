use std::collections::BTreeMap;

use crate::{ParameterSet, Result, TensorError, EPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: EPS, clip_norm: 100.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction and global-norm clipping. Moments are keyed by
/// parameter path so a checkpoint can persist them.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub(crate) step: u64,
    pub(crate) moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<f64> {
        if params.is_frozen() {
            return Err(TensorError::Contract("optimizer step on a frozen parameter set".into()));
        }
        let norm = params.grad_norm();
        if !norm.is_finite() {
            return Err(TensorError::Numeric(format!("gradient norm {norm}")));
        }
        let c = self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            let Some(grad) = t.grad.take() else { continue };
            let mom = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; grad.len()], v: vec![0.0; grad.len()] });
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(mom.m.iter_mut()).zip(mom.v.iter_mut()) {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        Ok(norm)
    }
}
