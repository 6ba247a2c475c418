//! Adaptive-moment optimizer with decoupled weight decay and global-norm
//! clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// global-norm clip threshold; `None` disables clipping
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moments, indexed like the registry.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Matrix<T>>,
    pub second: Vec<Matrix<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Matrix<T>> = store
            .iter()
            .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

pub fn optimizer_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut OptimizerState<T>,
    config: &AdamWConfig,
) -> Result<StepInfo> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::dim("gradient buffers do not mirror the registry"));
    }
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::dim(format!("gradient shape for {}", store.name(id))));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
    }
    let grad_norm = grads.global_norm().to_f64_lossy();
    let scale = match config.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(config.beta1);
    let b2 = T::of(config.beta2);
    let one = T::one();
    let correction1 = T::of(1.0 - config.beta1.powi(t));
    let correction2 = T::of(1.0 - config.beta2.powi(t));
    let lr = T::of(config.learning_rate);
    let decay = T::of(config.learning_rate * config.weight_decay);
    let eps = T::of(config.eps);
    let scale = T::of(scale);

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let m = state.first[id.index()].as_mut_slice();
        let v = state.second[id.index()].as_mut_slice();
        let p = store.get_mut(id).as_mut_slice();
        for i in 0..p.len() {
            let gi = g.map_or(T::zero(), |g| g.as_slice()[i] * scale);
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            p[i] = p[i] - decay * p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(StepInfo {
        grad_norm,
        clipped: scale < one,
    })
}
