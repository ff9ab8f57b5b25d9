//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::param::{param_count, Parameterized};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: &impl Parameterized) -> AdamW {
        let n = param_count(params);
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One update step. `grads` must have the same group layout as `params`.
    /// Decay is decoupled: it scales the parameter directly, not the
    /// gradient.
    pub fn step(&mut self, params: &mut impl Parameterized, grads: &impl Parameterized) {
        self.t += 1;
        let mut flat_grads = Vec::with_capacity(self.m.len());
        grads.for_each_group(&mut |_, data| flat_grads.extend_from_slice(data));
        assert_eq!(flat_grads.len(), self.m.len(), "gradient layout mismatch");

        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut offset = 0;
        params.for_each_group_mut(&mut |_, data| {
            for (k, p) in data.iter_mut().enumerate() {
                let g = flat_grads[offset + k];
                let m = &mut self.m[offset + k];
                let v = &mut self.v[offset + k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
            offset += data.len();
        });
    }
}
