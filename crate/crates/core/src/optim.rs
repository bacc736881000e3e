//! AdamW with cosine learning-rate decay.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Floor of the cosine schedule, as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-5,
            min_lr_ratio: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
        }
    }
}

/// `lr · (r + (1 − r) (1 + cos(π step / total)) / 2)`.
pub fn cosine_lr(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let frac = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
    let r = cfg.min_lr_ratio;
    cfg.lr * (r + (1.0 - r) * 0.5 * (1.0 + (PI * frac).cos()))
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub total_steps: usize,
    step: usize,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, total_steps: usize) -> Self {
        AdamW {
            cfg,
            total_steps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(&self.cfg, self.step, self.total_steps)
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<f64> {
        let norm = grads
            .iter()
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("gradient norm is {norm}"),
            });
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(*id);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let g = gv * clip;
                *mv = b1 * *mv + (1.0 - b1) * g;
                *vv = b2 * *vv + (1.0 - b2) * g * g;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + self.cfg.eps);
                *pv -= lr * (update + self.cfg.weight_decay * *pv);
            }
        }
        Ok(norm)
    }
}
