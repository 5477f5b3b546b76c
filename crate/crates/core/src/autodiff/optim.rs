//! AdamW with a polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Exponent of the `(1 - step / total)^power` schedule.
    pub poly_power: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            poly_power: 0.9,
            clip_norm: 1.0,
        }
    }
}

pub struct AdamW<T> {
    cfg: AdamWConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>, total_steps: usize) -> Self {
        let m = store
            .iter()
            .map(|(_, _, t)| vec![T::zero(); t.len()])
            .collect();
        let v = store
            .iter()
            .map(|(_, _, t)| vec![T::zero(); t.len()])
            .collect();
        Self {
            cfg,
            total_steps: total_steps.max(1),
            step: 0,
            m,
            v,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let frac = (self.step as f64 / self.total_steps as f64).min(1.0);
        self.cfg.lr * (1.0 - frac).max(0.0).powf(self.cfg.poly_power)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update. Matrices and kernels (rank ≥ 2) receive decoupled weight decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        let lr = self.current_lr();
        self.step += 1;
        let mut scale = 1.0;
        if self.cfg.clip_norm > 0.0 {
            let norm: f64 = grads
                .iter()
                .flatten()
                .flat_map(|g| g.data().iter().map(|v| v.to_f64_lossy().powi(2)))
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.clip_norm {
                scale = self.cfg.clip_norm / norm;
            }
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2) = (T::c(self.cfg.beta1), T::c(self.cfg.beta2));
        let step_size = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(self.cfg.eps);
        let scale = T::c(scale);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else {
                continue;
            };
            let p = store.get_mut(id);
            let decay = if p.shape().len() >= 2 {
                T::c(1.0 - lr * self.cfg.weight_decay)
            } else {
                T::one()
            };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi * scale;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w = *w * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}
