use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(ps: &ParamStore<F>) -> Self {
        Self {
            m: ps.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: ps.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter at learning
/// rate `lr`. Frozen parameters and their moments are left untouched.
pub fn adam_step<F: Scalar>(ps: &mut ParamStore<F>, state: &mut AdamState<F>, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if let Some(p) = ps.iter().find(|p| p.trainable && !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {} at step {}", p.name, state.step + 1)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
    let step_size = F::lit(lr / bc1);
    let inv_sqrt_bc2 = F::lit(1.0 / bc2.sqrt());
    let eps = F::lit(cfg.eps);
    let decay = F::lit(lr * cfg.weight_decay);
    for (i, p) in ps.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
            *w -= step_size * *mi / denom + decay * *w;
        }
    }
    Ok(())
}
