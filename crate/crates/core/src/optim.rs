//! Adam with bias correction and a cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numerics::{DenseMatrix, Gradients, ParamSet};

/// `lr0 · ½(1 + cos(π · step / total))`, clamped at zero. No restarts.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    let t = step.min(total) as f64 / total as f64;
    (lr0 * 0.5 * (1.0 + (PI * t).cos())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one matrix per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .iter()
            .map(|(_, _, p)| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Error payload for a non-finite gradient; the caller adds epoch and batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteGradient {
    pub param: String,
}

/// One Adam update. `lrs[i]` is the learning rate for parameter `i`, which
/// lets callers run separate parameter groups. Parameters without an entry
/// in `grads` are treated as having zero gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    lrs: &[f64],
    hyper: AdamHyper,
) -> Result<(), NonFiniteGradient> {
    for (id, name, _) in params.iter() {
        if let Some(g) = grads.get(&id) {
            if !g.is_finite() {
                return Err(NonFiniteGradient { param: name.to_string() });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.0;
        let lr = lrs[i];
        let grad = grads.get(&id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.get_mut(id);
        for k in 0..p.data().len() {
            let g = grad.map_or(0.0, |g| g.data()[k]);
            let mk = hyper.beta1 * m.data()[k] + (1.0 - hyper.beta1) * g;
            let vk = hyper.beta2 * v.data()[k] + (1.0 - hyper.beta2) * g * g;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk / bc1;
            let v_hat = vk / bc2;
            p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
