use std::sync::Arc;

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: 1.0,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to rank-2 tensors only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            config,
            step: 0,
            m: store.grad_buffer(),
            v: store.grad_buffer(),
        }
    }

    /// Applies one update from the stored gradients; returns the
    /// pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore) -> f64 {
        let c = self.config;
        let norm = store
            .groups()
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if c.clip > 0.0 && norm > c.clip {
            c.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.groups_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let decay = if p.tensor.shape().len() == 2 {
                c.weight_decay
            } else {
                0.0
            };
            let w = Arc::make_mut(&mut p.tensor).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, &g0) in p.grad.data().iter().enumerate() {
                let g = g0 * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + decay * w[j]);
            }
        }
        norm
    }
}
