use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Moment buffers are allocated on the first call; later calls must pass
/// tensors of the same shapes in the same order.
pub fn adam_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err!("{} parameters but {} gradients", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(shape_err!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
    }
    if state.first.is_empty() && state.step == 0 {
        state.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() || state.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(shape_err!("optimizer state does not match the parameter list"));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.as_f64();
            let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
            let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            *w = T::from_f64(w.as_f64() - update);
        }
    }
    Ok(())
}
