//! Decoupled-weight-decay Adam.
//!
//! Update order per parameter: moment updates with bias correction, then
//! `w -= lr*wd*w` (the decoupled decay, independent of the adaptive step),
//! then `w -= lr * m_hat / (sqrt(v_hat) + eps)`.

use std::collections::BTreeMap;

use crate::encoders::ParamStore;
use crate::tensor::{TensorError, TensorResult};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moments keyed by parameter path, plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One optimizer step over every trainable parameter carrying a gradient.
/// Non-finite gradients abort with diagnostics before touching anything.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    hp: &AdamHyper,
) -> TensorResult<()> {
    for e in store.iter() {
        if !e.tensor.requires_grad {
            continue;
        }
        if let Some(g) = &e.tensor.grad {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(TensorError::Numeric(format!(
                    "non-finite gradient {bad} in {}",
                    e.name
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for idx in 0..store.len() {
        let name = store.entry(idx).name.clone();
        let entry = store.entry_mut(idx);
        if !entry.tensor.requires_grad {
            continue;
        }
        let Some(grad) = entry.tensor.grad.clone() else {
            continue;
        };
        let n = grad.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name).or_insert_with(|| vec![0.0; n]);
        let data = entry.tensor.data_mut();
        for i in 0..n {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * grad[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= hp.lr * hp.weight_decay * data[i];
            data[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Scales every pending gradient (used to average over accumulation groups).
pub fn scale_grads(store: &mut ParamStore, factor: f64) {
    for e in store.iter_mut() {
        if let Some(g) = &mut e.tensor.grad {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
