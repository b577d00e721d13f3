//! Adam with decoupled weight decay, plus the cosine learning-rate schedule
//! used by every training stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::scalar::{s, to_f64};
use crate::numerics::{ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }
    }
}

/// Weight decay is applied directly to the weights, scaled by the learning
/// rate but not by the adaptive step.
pub struct AdamW<S: Scalar = f64> {
    cfg: AdamConfig,
    step: usize,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Updates every trainable parameter that has a gradient entry.
    /// `lr_for` picks the learning rate per parameter name, so different
    /// sub-networks can train at different speeds.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, param) in store.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(grad) = grads.get(name) else { continue };
            let lr = lr_for(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for i in 0..grad.numel() {
                let g = to_f64(grad.data()[i]);
                let mi = b1 * to_f64(m.data()[i]) + (1.0 - b1) * g;
                let vi = b2 * to_f64(v.data()[i]) + (1.0 - b2) * g * g;
                m.data_mut()[i] = s(mi);
                v.data_mut()[i] = s(vi);
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                let w = to_f64(param.value.data()[i]);
                let update = m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * w;
                param.value.data_mut()[i] = s(w - lr * update);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 to 0 at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
