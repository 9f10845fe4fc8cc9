//! Decoupled-weight-decay Adam and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::error::{CgtError, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update from the accumulated gradients, which are then zeroed.
/// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
pub fn adamw_step(
    store: &mut ParameterStore,
    lr: f64,
    weight_decay: f64,
    state: &mut AdamState,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    if state.m.len() != ids.len() {
        return Err(CgtError::Config(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            ids.len()
        )));
    }
    for &id in &ids {
        if let Some(bad) = store.grad(id).iter().find(|g| !g.is_finite()) {
            return Err(CgtError::Numerical(format!(
                "non-finite gradient {bad} in parameter {}",
                store.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (k, &id) in ids.iter().enumerate() {
        let grad = store.grad(id).to_vec();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let theta = &mut store.get_mut(id).data;
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * theta[i]);
        }
    }
    store.zero_grads();
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let norm = ids
        .iter()
        .map(|&id| store.grad(id).iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for id in ids {
            store.grad_mut(id).iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then cosine decay to
/// 0 at `total_steps`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
