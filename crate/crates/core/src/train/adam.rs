use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient rejects the whole
/// step and leaves parameters and moments untouched.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::dim("adam_step", &[grads.len(), state.m.len()], &[store.len()]));
    }
    for (p, g) in store.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.value.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Domain {
                op: "adam_step",
                msg: format!("non-finite gradient for {}", p.name),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, x) in p.value.data_mut().iter_mut().enumerate() {
            *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before scaling. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

/// Step decay: `lr · factor^⌊epoch / every⌋`.
pub fn lr_at(lr: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return lr;
    }
    lr * factor.powi((epoch / every) as i32)
}
