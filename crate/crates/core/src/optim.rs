//! Adam with decoupled weight decay, and global-norm gradient clipping.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Optimizer moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments shaped like every parameter in `store`.
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step_count: 0,
            m: zeros(),
            v: zeros(),
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One update of every parameter from its accumulated gradient.
///
/// Weight decay shrinks the parameter directly (`p -= lr * wd * p`) before
/// the bias-corrected Adam step, so it never enters the moment estimates.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Contract(alloc::format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for ((p, m), v) in store.iter().zip(&state.m).zip(&state.v) {
        if p.grad.shape() != p.value.shape() || m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::Contract(alloc::format!("missing or misshapen gradient for {}", p.name)));
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - math::pow(state.beta1, t);
    let bc2 = 1.0 - math::pow(state.beta2, t);
    let (lr, wd, b1, b2, eps) = (state.lr, state.weight_decay, state.beta1, state.beta2, state.epsilon);
    for ((p, m), v) in store.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let g = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            if wd != 0.0 {
                value[i] -= lr * wd * value[i];
            }
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + (1.0 - b1) * g[i];
            let mhat = *mi / bc1;
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + (1.0 - b2) * g[i] * g[i];
            let vhat = *vi / bc2;
            value[i] -= lr * mhat / (math::sqrt(vhat) + eps);
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient buffer.
pub fn grad_global_norm(store: &ParamStore) -> f64 {
    let sq: f64 = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum();
    math::sqrt(sq)
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the factor applied (1.0 when nothing changed).
pub fn clip_gradients_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_global_norm(store);
    if norm <= max_norm || !norm.is_finite() {
        return 1.0;
    }
    let factor = max_norm / norm;
    for p in store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
    }
    factor
}
