//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records one forward pass. Parameters are referenced from a
//! shared [`ParamStore`] without copying, so many tapes can run concurrently
//! against the same immutable store. [`Tape::backward`] returns gradients
//! for every parameter the pass touched.

use crate::error::{Error, Result};
use crate::numerics::matrix::dot;
use crate::numerics::ops::{masked_softmax_in_place, normalize, softmax_in_place};
use crate::numerics::{Activation, Matrix};
use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    Gather {
        table: ParamId,
        rows: Vec<usize>,
    },
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    /// matrix plus a 1×n row broadcast over rows
    AddRow(Var, Var),
    Scale(Var, T),
    Activate(Var, Activation),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    MeanRows(Var),
    RepeatRows(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Matrix<T>>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows of a parameter table, in the given order.
    pub fn gather(&mut self, table: ParamId, rows: &[usize]) -> Result<Var> {
        let t = self.params.get(table);
        let mut out = Matrix::zeros(rows.len(), t.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= t.rows() {
                return Err(Error::Vocabulary { id: r, size: t.rows() });
            }
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xm, rm) = (self.value(x), self.value(row));
        if rm.rows() != 1 || rm.cols() != xm.cols() {
            return Err(Error::dim(format!(
                "add_row: {:?} plus row {:?}",
                xm.shape(),
                rm.shape()
            )));
        }
        let mut v = xm.clone();
        let r = rm.as_slice();
        for i in 0..v.rows() {
            for (a, &b) in v.row_mut(i).iter_mut().zip(r) {
                *a += b;
            }
        }
        Ok(self.push(v, Op::AddRow(x, row)))
    }

    /// `x · w + b` with `b` a 1×n row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        let v = self.value(x).map(|e| act.apply(e));
        self.push(v, Op::Activate(x, act))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Row softmax restricted to columns with `keep[c] == true`.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let mut v = self.value(x).clone();
        if keep.len() != v.cols() {
            return Err(Error::dim("attention mask width"));
        }
        if !keep.iter().any(|k| *k) {
            return Err(Error::dim("attention mask excludes every key"));
        }
        for r in 0..v.rows() {
            masked_softmax_in_place(v.row_mut(r), keep);
        }
        // masked entries are exactly zero, so the plain softmax adjoint applies
        Ok(self.push(v, Op::SoftmaxRows(x)))
    }

    /// Row-wise layer normalization with 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        if cols < 2 {
            return Err(Error::dim("layer_norm needs at least two columns"));
        }
        if self.value(gain).shape() != (1, cols) || self.value(bias).shape() != (1, cols) {
            return Err(Error::dim("layer_norm parameter width"));
        }
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let stats = normalize(xm.row(r), eps);
            normalized.row_mut(r).copy_from_slice(&stats.normalized);
            inv_std.push(stats.inv_std);
        }
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let mut out = normalized.clone();
        for r in 0..rows {
            for ((o, &gi), &bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Elementwise product with a precomputed (already rescaled) mask.
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xm = self.value(x);
        if mask.len() != xm.len() {
            return Err(Error::dim("dropout mask size"));
        }
        let data = xm.as_slice().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Matrix::from_vec(xm.rows(), xm.cols(), data)?;
        Ok(self.push(v, Op::Dropout(x, mask)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xm = self.value(x);
        if start + len > xm.cols() {
            return Err(Error::dim("slice_cols out of range"));
        }
        let mut v = Matrix::zeros(xm.rows(), len);
        for r in 0..xm.rows() {
            v.row_mut(r).copy_from_slice(&xm.row(r)[start..start + len]);
        }
        Ok(self.push(v, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::dim("concat_cols row mismatch"));
        }
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                v.row_mut(r)[c..c + src.len()].copy_from_slice(src);
                c += src.len();
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::dim("concat_rows column mismatch"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).as_slice());
        }
        let rows = data.len() / cols.max(1);
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let xm = self.value(x);
        if r >= xm.rows() {
            return Err(Error::dim("row index out of range"));
        }
        let v = Matrix::row_vector(xm.row(r));
        Ok(self.push(v, Op::Row(x, r)))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let inv = T::one() / T::of(xm.rows() as f64);
        let mut v = Matrix::zeros(1, xm.cols());
        for r in 0..xm.rows() {
            for (a, &b) in v.as_mut_slice().iter_mut().zip(xm.row(r)) {
                *a += b;
            }
        }
        v.as_mut_slice().iter_mut().for_each(|a| *a *= inv);
        self.push(v, Op::MeanRows(x))
    }

    /// Tiles a 1×n row `times` times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xm = self.value(x);
        if xm.rows() != 1 {
            return Err(Error::dim("repeat_rows expects a single row"));
        }
        let mut data = Vec::with_capacity(times * xm.cols());
        for _ in 0..times {
            data.extend_from_slice(xm.as_slice());
        }
        let v = Matrix::from_vec(times, xm.cols(), data)?;
        Ok(self.push(v, Op::RepeatRows(x)))
    }

    /// `−log softmax(logits)[label]` for a 1×C row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lm = self.value(logits);
        if lm.rows() != 1 {
            return Err(Error::dim("cross_entropy expects a single row of logits"));
        }
        if label >= lm.cols() {
            return Err(Error::Label {
                label,
                classes: lm.cols(),
            });
        }
        let mut probs = lm.as_slice().to_vec();
        softmax_in_place(&mut probs);
        let lse = crate::numerics::ops::log_sum_exp(lm.as_slice());
        let loss = lse - lm.as_slice()[label];
        Ok(self.push(Matrix::filled(1, 1, loss), Op::CrossEntropy { logits, label, probs }))
    }

    /// Backpropagates from a 1×1 node.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        self.backward_seeded(root, Matrix::filled(1, 1, T::one()))
    }

    /// Backpropagates an arbitrary upstream gradient for `root`.
    pub fn backward_seeded(&self, root: Var, seed: Matrix<T>) -> Result<Grads<T>> {
        if self.shape(root) != seed.shape() {
            return Err(Error::dim("backward seed shape"));
        }
        let mut grads: Vec<Option<Matrix<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);
        let mut out = Grads::for_store(self.params);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Gather { table, rows } => {
                    let t = self.params.get(*table);
                    let slot = out.slot_mut(*table, t.rows(), t.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, &b) in slot.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: ga = g b, gb = gᵀ a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (a, &b) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g);
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scale(*s)),
                Op::Activate(x, act) => {
                    let xin = self.value(*x).as_slice();
                    let y = self.value(Var(idx)).as_slice();
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(xin.iter().zip(y))
                        .map(|(&gi, (&xi, &yi))| gi * act.derivative(xi, yi))
                        .collect();
                    acc(&mut grads, *x, Matrix::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::SoftmaxRows(x) => {
                    let y = self.value(Var(idx));
                    let mut gx = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s = dot(yr, gr);
                        for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - s);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = self.value(*gain).as_slice();
                    let (rows, cols) = g.shape();
                    let n = T::of(cols as f64);
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gb = Matrix::zeros(1, cols);
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let gr = g.row(r);
                        let xh = normalized.row(r);
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xh[c];
                            gg.as_mut_slice()[c] += gr[c] * xh[c];
                            gb.as_mut_slice()[c] += gr[c];
                        }
                        let scale = istd / n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            out[c] = scale * (n * d - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *x, gx);
                }
                Op::Dropout(x, mask) => {
                    let data = g.as_slice().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    acc(&mut grads, *x, Matrix::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::SliceCols(x, start) => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(*p);
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c..c + cols]);
                        }
                        c += cols;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(*p);
                        let data = g.as_slice()[r0 * cols..(r0 + rows) * cols].to_vec();
                        r0 += rows;
                        acc(&mut grads, *p, Matrix::from_vec(rows, cols, data)?);
                    }
                }
                Op::Row(x, r) => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    gx.row_mut(*r).copy_from_slice(g.as_slice());
                    acc(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.shape(*x);
                    let inv = T::one() / T::of(rows as f64);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for (a, &b) in gx.row_mut(r).iter_mut().zip(g.as_slice()) {
                            *a = b * inv;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RepeatRows(x) => {
                    let mut gx = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (a, &b) in gx.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let up = g.as_slice()[0];
                    let mut gl = Matrix::row_vector(probs);
                    gl.as_mut_slice()[*label] -= T::one();
                    acc(&mut grads, *logits, gl.scale(up));
                }
            }
        }
        Ok(out)
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
