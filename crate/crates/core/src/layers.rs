//! Parameter bundles shared by the fusion block and the encoder.

use crate::error::Result;
use crate::numerics::ops::LAYER_NORM_EPS;
use crate::numerics::{gaussian_matrix, Matrix, Rng};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Gaussian weight with stddev `sqrt(1 / fan_in)`.
pub(crate) fn init_weight<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: String,
    fan_in: usize,
    fan_out: usize,
) -> Result<ParamId> {
    let w = gaussian_matrix(rng, fan_in, fan_out, 0.0, (1.0 / fan_in as f64).sqrt())?;
    Ok(store.add(name, w))
}

/// Affine map `x W + b`, W stored fan_in × fan_out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let weight = init_weight(store, rng, format!("{name}.weight"), fan_in, fan_out)?;
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, width, T::one())),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, T::of(LAYER_NORM_EPS))
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::init(store, rng, &format!("{name}.inner"), width, hidden)?,
            outer: Linear::init(store, rng, &format!("{name}.outer"), hidden, width)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, h)
    }
}
