//! Elementwise nonlinearities, softmax and layer normalization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Softmax over the unmasked entries; masked entries come out exactly zero.
/// At least one entry must be unmasked.
pub(crate) fn masked_softmax_in_place<T: Scalar>(v: &mut [T], keep: &[bool]) {
    let max = v
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(x, _)| *x)
        .fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (x, k) in v.iter_mut().zip(keep) {
        *x = if *k { (*x - max).exp() } else { T::zero() };
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Per-vector statistics kept for the backward pass.
pub(crate) struct NormStats<T> {
    pub normalized: Vec<T>,
    pub inv_std: T,
}

pub(crate) fn normalize<T: Scalar>(v: &[T], eps: T) -> NormStats<T> {
    let n = T::of(v.len() as f64);
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    NormStats {
        normalized: v.iter().map(|&x| (x - mean) * inv_std).collect(),
        inv_std,
    }
}

/// `gain ⊙ (v − mean) / sqrt(var + eps) + bias` with the biased variance.
pub fn layer_norm<T: Scalar>(v: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if v.len() < 2 {
        return Err(Error::dim("layer_norm needs at least two entries"));
    }
    if gain.len() != v.len() || bias.len() != v.len() {
        return Err(Error::dim(format!(
            "layer_norm: vector {} gain {} bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    let stats = normalize(v, eps);
    Ok(stats
        .normalized
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&x, (&g, &b))| g * x + b)
        .collect())
}

/// Readout / hidden activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    LeakyRelu,
    Linear,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_RELU_SLOPE)
                }
            }
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_RELU_SLOPE)
                }
            }
            Activation::Linear => T::one(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}
