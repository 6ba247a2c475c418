//! Flat registry of named trainable tensors and matching gradient buffers.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "parameter {name} registered twice");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Replaces a tensor's contents, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Matrix<T>) -> Result<()> {
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {}: shape {:?} vs {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((value.rows() as u64).to_le_bytes());
            h.update((value.cols() as u64).to_le_bytes());
            buf.clear();
            for v in value.as_slice() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Gradient buffers mirroring a [`ParamStore`]; untouched slots stay `None`.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.slots[id.0].as_ref()
    }

    pub(crate) fn slot_mut(&mut self, id: ParamId, rows: usize, cols: usize) -> &mut Matrix<T> {
        self.slots[id.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix<T>) {
        match &mut self.slots[id.0] {
            Some(existing) => {
                for (a, &b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds every slot of `other` into `self`.
    pub fn merge(&mut self, other: &Grads<T>) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.as_slice())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Dense `f64` copy of one slot (zeros when untouched).
    pub fn dense_f64(&self, id: ParamId, store: &ParamStore<T>) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.as_slice().iter().map(|v| v.to_f64_lossy()).collect(),
            None => vec![0.0; store.get(id).len()],
        }
    }
}

/// Finite-difference agreement for one registry tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorGradError {
    pub name: String,
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

/// Compares `analytic` against central differences of `loss`, one registry
/// tensor at a time. `loss` must hold everything but the store fixed.
pub fn gradient_check<F>(
    store: &ParamStore<f64>,
    analytic: &Grads<f64>,
    h: f64,
    loss: F,
) -> Result<Vec<TensorGradError>>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.get(id).as_slice()[i];
            probe.get_mut(id).as_mut_slice()[i] = orig + h;
            let plus = loss(&probe)?;
            probe.get_mut(id).as_mut_slice()[i] = orig - h;
            let minus = loss(&probe)?;
            probe.get_mut(id).as_mut_slice()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss not finite around {}[{i}]",
                    store.name(id)
                )));
            }
            numeric.push((plus - minus) / (2.0 * h));
        }
        let exact = analytic.dense_f64(id, store);
        let max_abs_error = exact
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        report.push(TensorGradError {
            name: store.name(id).to_string(),
            relative_error: crate::numerics::relative_error(&exact, &numeric),
            max_abs_error,
            analytic_norm: crate::numerics::matrix::norm(&exact),
        });
    }
    Ok(report)
}
