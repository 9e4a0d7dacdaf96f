//! AdamW with bias-corrected moments and decoupled weight decay.
//!
//! Per step `t` (1-based) and parameter `θ` with gradient `g`:
//!
//! ```text
//! θ ← θ − lr·wd·θ
//! m ← β1·m + (1−β1)·g
//! v ← β2·v + (1−β2)·g²
//! θ ← θ − lr · (m / (1−β1^t)) / (√(v / (1−β2^t)) + ε)
//! ```
//!
//! Frozen parameters are skipped entirely and get no moment slots.

use std::collections::BTreeMap;

use super::param::Module;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, t: 0, moments: BTreeMap::new() }
    }

    /// Applies one update to every trainable, unfrozen parameter of `model`.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        self.step_scaled(model, 1.0)
    }

    /// [`Self::step`] with the learning rate multiplied by `lr_scale`.
    pub fn step_scaled<M: Module + ?Sized>(&mut self, model: &mut M, lr_scale: f64) -> Result<()> {
        // Validate before touching anything so a failed step leaves no trace.
        let mut missing = None;
        model.visit_params(&mut |p| {
            if missing.is_none() && p.requires_grad() {
                match &p.grad {
                    Some(g) if g.shape() == p.value.shape() => {}
                    _ => missing = Some(p.name().to_string()),
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGrad(name));
        }

        self.t += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let lr = lr * lr_scale;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |p| {
            if !p.requires_grad() {
                return;
            }
            let shape = p.value.shape().to_vec();
            let slot = moments
                .entry(p.name().to_string())
                .or_insert_with(|| Moments { m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) });
            let g = p.grad.as_ref().expect("validated above");
            let (gm, gv) = (slot.m.data_mut(), slot.v.data_mut());
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                *w -= lr * weight_decay * *w;
                gm[i] = beta1 * gm[i] + (1.0 - beta1) * gi;
                gv[i] = beta2 * gv[i] + (1.0 - beta2) * gi * gi;
                let m_hat = gm[i] / bc1;
                let v_hat = gv[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}
