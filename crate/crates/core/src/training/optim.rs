//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::HashMap;

use crate::autodiff::{Array, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Array, Array)>,
    skipped: usize,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Steps refused because a gradient was not finite.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// One update at learning rate `lr_t`. Non-trainable parameters are left
    /// alone. Returns `false`, touching nothing, if any gradient is not
    /// finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array)], lr_t: f64) -> bool {
        if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            self.skipped += 1;
            log::warn!("skipping optimizer step with non-finite gradients");
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Array::zeros(g.raw_dim()), Array::zeros(g.raw_dim())));
            p.value.mapv_inplace(|w| w * (1.0 - lr_t * self.weight_decay));
            ndarray::Zip::from(&mut p.value)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
        true
    }
}

/// `lr (1 + cos(pi t / T)) / 2`, clamped to the endpoint past `T`.
pub fn cosine_lr(lr: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (t.min(total)) as f64 / total as f64;
    lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}
