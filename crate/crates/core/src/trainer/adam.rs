//! Adam with raw second-moment retention.
//!
//! The update uses bias-corrected moment estimates, but the stored
//! `exp_avg_sq` stays the raw EMA `v = b2*v + (1-b2)*g^2` because that is
//! what optimizer checkpoints carry and what the merge preconditioner
//! consumes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type ParamMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second gradient moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub exp_avg: ParamMap,
    pub exp_avg_sq: ParamMap,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamMap) -> Self {
        let zeros = |src: &ParamMap| -> ParamMap {
            src.iter()
                .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
                .collect()
        };
        AdamState {
            exp_avg: zeros(params),
            exp_avg_sq: zeros(params),
            step: 0,
        }
    }
}

/// One Adam update over every parameter tensor. Rejects non-finite gradients
/// before touching any state, so a failed step leaves params and state
/// unchanged.
pub fn adam_step(
    params: &mut ParamMap,
    grads: &ParamMap,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    if hp.lr.is_nan() || hp.lr <= 0.0 {
        return Err(Error::Training(format!(
            "learning rate {} must be > 0",
            hp.lr
        )));
    }
    for (name, g) in grads {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in '{name}' at index {i}"
            )));
        }
        if params.get(name).map(Vec::len) != Some(g.len()) {
            return Err(Error::Training(format!(
                "gradient shape mismatch for '{name}'"
            )));
        }
    }
    state.step += 1;
    let k = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(k);
    let bc2 = 1.0 - hp.beta2.powi(k);
    for (name, g) in grads {
        let w = params.get_mut(name).expect("checked above");
        let m = state.exp_avg.get_mut(name).expect("state mirrors params");
        let v = state
            .exp_avg_sq
            .get_mut(name)
            .expect("state mirrors params");
        for i in 0..g.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
