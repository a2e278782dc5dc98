//! Adam with a cosine-decayed learning rate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::NdArray;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Final learning rate as a fraction of `lr`.
    pub final_fraction: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_fraction: 0.01,
        }
    }
}

/// `lr · (f + (1 − f)·½(1 + cos(π·step/total)))`.
pub fn cosine_lr(base: f64, final_fraction: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub struct Adam {
    pub config: AdamConfig,
    total_steps: usize,
    step: usize,
    moments: BTreeMap<String, (NdArray, NdArray)>,
}

impl Adam {
    pub fn new(config: AdamConfig, total_steps: usize) -> Self {
        Self {
            config,
            total_steps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.lr, self.config.final_fraction, self.step, self.total_steps)
    }

    /// Apply one update; gradients of frozen or unknown parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, NdArray>) -> Result<()> {
        for (name, gr) in grads {
            if !gr.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, gr) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let value = store.get_mut(name)?;
            if value.shape() != gr.shape() {
                return Err(Error::shape(name.clone(), "gradient shape differs from parameter"));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (NdArray::zeros(gr.shape()), NdArray::zeros(gr.shape())));
            for (((p, &g), mm), vv) in value
                .data_mut()
                .iter_mut()
                .zip(gr.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mm = c.beta1 * *mm + (1.0 - c.beta1) * g;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * g * g;
                *p -= lr * (*mm / bc1) / ((*vv / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.1, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 0.1, 10, 10) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(1.0, 0.0, 5, 10) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", NdArray::vector(vec![1.0, -1.0]), true);
        store.insert("frozen", NdArray::vector(vec![1.0]), false);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), 0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), NdArray::vector(vec![3.0, -0.5]));
        grads.insert("frozen".to_string(), NdArray::vector(vec![1.0]));
        opt.step(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] + 0.9).abs() < 1e-8, "{w:?}");
        assert_eq!(store.get("frozen").unwrap().data(), &[1.0]);
    }
}
