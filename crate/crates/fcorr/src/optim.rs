//! First-order adaptive-moment optimizer with cosine learning-rate decay.

use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Uncertainty heads learn slower than everything else, so the coordinate
/// branch can push errors below lambda before (1 - u) can gate its
/// gradient off.
const UNC_HEAD_LR_SCALE: f64 = 0.1;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: BTreeMap::new() }
    }

    /// Apply one update from the accumulated gradients, scaled by
    /// `lr_scale` (the schedule), then clear the gradients.
    pub fn step(&mut self, model: &mut Model, lr_scale: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * lr_scale;
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let state = &mut self.state;
        model.params(&mut |name, param| {
            let grad = match param.grad() {
                Some(g) => g,
                None => return,
            };
            let numel = param.numel();
            let lr_here = if name.contains(".head_unc") { lr * UNC_HEAD_LR_SCALE } else { lr };
            let (m, v) = state
                .entry(name)
                .or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]));
            let mut data = param.data().to_vec();
            for i in 0..numel {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr_here * m_hat / (v_hat.sqrt() + eps);
            }
            *param = Tensor::param(param.shape(), data).expect("shape preserved");
        });
        Ok(())
    }
}

/// Cosine decay from 1 at step 0 to ~0 at `total` steps.
pub fn cosine_scale(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let x = (step as f64 / total as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}
