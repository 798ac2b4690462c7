//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::model::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.values(id).len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update using the gradients currently held in `store`.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    for id in store.ids() {
        if let Some(i) = store.grad(id).iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {}[{i}] is {}",
                store.name(id),
                store.grad(id)[i]
            )));
        }
    }
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let AdamHyper {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        eps,
    } = *hyper;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((_, values, grads), (m, v)) in store
        .values_and_grads_mut()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), mi), vi) in values.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
