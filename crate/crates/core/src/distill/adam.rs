use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, laid out like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: ParamSet,
    pub v: ParamSet,
    /// Number of updates applied so far.
    pub updates: u64,
}

impl AdamMoments {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), updates: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    moments: &mut AdamMoments,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    moments.updates += 1;
    let k = moments.updates as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(k), 1.0 - cfg.beta2.powi(k));
    let tensors = params.tensors_mut().zip(moments.m.tensors_mut()).zip(moments.v.tensors_mut());
    for (((p, m), v), g) in tensors.zip(grads) {
        p.expect_same_shape(g)?;
        let iter = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
        for (((p, m), v), &g) in iter {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
