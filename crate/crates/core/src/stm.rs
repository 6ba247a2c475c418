//! Short-term memory: token and positional embeddings with a leading CLS
//! token, a pre-norm transformer encoder over one sentence, and the
//! classification head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{init_weight, FeedForward, LayerNorm, Linear};
use crate::numerics::{Matrix, Rng};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StmConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_hidden: usize,
    pub attention_dropout: f64,
    pub num_classes: usize,
}

impl StmConfig {
    pub fn desk(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            model_dim: 128,
            layers: 2,
            heads: 4,
            max_len: 64,
            ffn_hidden: 512,
            attention_dropout: 0.1,
            num_classes,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.vocab_size <= CLS_ID {
            out.push(format!("vocab_size must exceed {CLS_ID} (PAD/UNK/CLS are reserved)"));
        }
        if self.model_dim < 2 {
            out.push("model_dim must be at least 2".into());
        }
        if self.layers == 0 {
            out.push("layers must be at least 1".into());
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads.max(1)) {
            out.push(format!(
                "heads ({}) must be positive and divide model_dim ({})",
                self.heads, self.model_dim
            ));
        }
        if self.max_len == 0 {
            out.push("max_len must be at least 1".into());
        }
        if self.ffn_hidden == 0 {
            out.push("ffn_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            out.push(format!("attention_dropout {} not in [0, 1)", self.attention_dropout));
        }
        if self.num_classes < 2 {
            out.push("num_classes must be at least 2".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingParams {
    /// V × d
    pub token_table: ParamId,
    /// (J_max + 1) × d, row 0 belongs to CLS
    pub positional_table: ParamId,
    pub max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub attn_norm: LayerNorm,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StmParams {
    pub embedding: EmbeddingParams,
    pub layers: Vec<EncoderLayerParams>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub heads: usize,
    pub attention_dropout: f64,
}

/// Embedded sentence plus whether it was cut to `max_len` tokens.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub rows: Var,
    /// false for PAD positions, which are never attended
    pub keep: Vec<bool>,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    /// per layer, per head
    pub attention: Vec<Vec<Var>>,
}

impl StmParams {
    pub fn init<T: Scalar>(config: &StmConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let embed_std = (1.0 / d as f64).sqrt();
        let token_table = store.add(
            "embedding.tokens",
            crate::numerics::gaussian_matrix(rng, config.vocab_size, d, 0.0, embed_std)?,
        );
        let positional_table = store.add(
            "embedding.positions",
            crate::numerics::gaussian_matrix(rng, config.max_len + 1, d, 0.0, embed_std)?,
        );
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("encoder.{i}");
            layers.push(EncoderLayerParams {
                attn_norm: LayerNorm::init(store, &format!("{p}.attn_norm"), d),
                w_q: init_weight(store, rng, format!("{p}.w_q"), d, d)?,
                w_k: init_weight(store, rng, format!("{p}.w_k"), d, d)?,
                w_v: init_weight(store, rng, format!("{p}.w_v"), d, d)?,
                w_o: Linear::init(store, rng, &format!("{p}.w_o"), d, d)?,
                ffn_norm: LayerNorm::init(store, &format!("{p}.ffn_norm"), d),
                ffn: FeedForward::init(store, rng, &format!("{p}.ffn"), d, config.ffn_hidden)?,
            });
        }
        let final_norm = LayerNorm::init(store, "encoder.final_norm", d);
        let head = Linear::init(store, rng, "head", d, config.num_classes)?;
        Ok(Self {
            embedding: EmbeddingParams {
                token_table,
                positional_table,
                max_len: config.max_len,
            },
            layers,
            final_norm,
            head,
            heads: config.heads,
            attention_dropout: config.attention_dropout,
        })
    }
}

/// CLS at row 0, then at most `max_len` tokens; position `j` added to row `j`.
pub fn embed<T: Scalar>(tape: &mut Tape<'_, T>, ids: &[usize], params: &EmbeddingParams) -> Result<Embedded> {
    let truncated = ids.len() > params.max_len;
    let kept = &ids[..ids.len().min(params.max_len)];
    let mut rows = Vec::with_capacity(kept.len() + 1);
    rows.push(CLS_ID);
    rows.extend_from_slice(kept);
    let tokens = tape.gather(params.token_table, &rows)?;
    let positions: Vec<usize> = (0..rows.len()).collect();
    let pos = tape.gather(params.positional_table, &positions)?;
    let sum = tape.add(tokens, pos)?;
    let keep = rows.iter().enumerate().map(|(j, &id)| j == 0 || id != PAD_ID).collect();
    Ok(Embedded {
        rows: sum,
        keep,
        truncated,
    })
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
fn dropout_mask<T: Scalar>(rng: &mut Rng, len: usize, p: f64) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect()
}

fn self_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    keep: &[bool],
    layer: &EncoderLayerParams,
    heads: usize,
    dropout: Option<(&mut Rng, f64)>,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(x).1;
    let d_h = d / heads;
    let w_q = tape.param(layer.w_q);
    let w_k = tape.param(layer.w_k);
    let w_v = tape.param(layer.w_v);
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let inv_sqrt = T::one() / T::of(d_h as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    let mut dropout = dropout;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_h, d_h)?;
        let kh = tape.slice_cols(k, h * d_h, d_h)?;
        let vh = tape.slice_cols(v, h * d_h, d_h)?;
        let raw = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(raw, inv_sqrt);
        let a = tape.masked_softmax_rows(scores, keep)?;
        attention.push(a);
        let a = match dropout.as_mut() {
            Some((rng, p)) if *p > 0.0 => {
                let mask = dropout_mask(rng, tape.value(a).len(), *p);
                tape.dropout(a, mask)?
            }
            _ => a,
        };
        contexts.push(tape.matmul(a, vh)?);
    }
    let joined = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)?
    };
    Ok((layer.w_o.forward(tape, joined)?, attention))
}

/// Pre-norm blocks `x + MHA(LN(x))`, `x + FFN(LN(x))`, then a final norm.
/// Attention dropout is drawn from `dropout_rng` when given (train mode).
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    keep: &[bool],
    params: &StmParams,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<EncoderOutput> {
    if params.layers.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    let d = tape.shape(x).1;
    if tape.params().get(params.layers[0].w_q).rows() != d {
        return Err(Error::dim(format!("encoder input width {d} does not match parameters")));
    }
    if keep.len() != tape.shape(x).0 {
        return Err(Error::dim("attention mask length differs from token count"));
    }
    let mut h = x;
    let mut attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let normed = layer.attn_norm.forward(tape, h)?;
        let dropout = dropout_rng.as_deref_mut().map(|r| (r, params.attention_dropout));
        let (attn, maps) = self_attention(tape, normed, keep, layer, params.heads, dropout)?;
        attention.push(maps);
        h = tape.add(h, attn)?;
        let normed = layer.ffn_norm.forward(tape, h)?;
        let f = layer.ffn.forward(tape, normed)?;
        h = tape.add(h, f)?;
    }
    let hidden = params.final_norm.forward(tape, h)?;
    Ok(EncoderOutput { hidden, attention })
}

pub fn extract_cls<T: Scalar>(tape: &mut Tape<'_, T>, hidden: Var) -> Result<Var> {
    if tape.shape(hidden).0 == 0 {
        return Err(Error::dim("no hidden rows"));
    }
    tape.row(hidden, 0)
}

pub fn classify<T: Scalar>(tape: &mut Tape<'_, T>, h_cls: Var, head: &Linear) -> Result<Var> {
    head.forward(tape, h_cls)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Zero memory token row used before any history exists.
pub fn zero_memory<T: Scalar>(width: usize) -> Matrix<T> {
    Matrix::zeros(1, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::params::gradient_check;

    fn micro(seed: u64) -> (ParamStore<f64>, StmParams, StmConfig) {
        let config = StmConfig {
            vocab_size: 12,
            model_dim: 16,
            layers: 2,
            heads: 2,
            max_len: 6,
            ffn_hidden: 24,
            attention_dropout: 0.1,
            num_classes: 3,
        };
        let mut store = ParamStore::new();
        let p = StmParams::init(&config, &mut store, &mut Rng::new(seed, 0)).unwrap();
        oracle::jitter_norms(&mut store, seed);
        (store, p, config)
    }

    fn run(store: &ParamStore<f64>, p: &StmParams, ids: &[usize], rng: Option<&mut Rng>) -> Matrix<f64> {
        let mut tape = Tape::new(store);
        let e = embed(&mut tape, ids, &p.embedding).unwrap();
        let out = encoder_forward(&mut tape, e.rows, &e.keep, p, rng).unwrap();
        tape.value(out.hidden).clone()
    }

    #[test]
    fn embedding_shapes_and_truncation() {
        let (store, p, _) = micro(1);
        let mut tape = Tape::new(&store);
        let e = embed(&mut tape, &[], &p.embedding).unwrap();
        assert_eq!(tape.shape(e.rows), (1, 16));
        let cls = store.get(p.embedding.token_table).row(CLS_ID);
        let pos = store.get(p.embedding.positional_table).row(0);
        for (c, (a, b)) in tape.value(e.rows).row(0).iter().zip(cls.iter().zip(pos)) {
            assert_eq!(*c, a + b);
        }
        let e = embed(&mut tape, &[3, 4, 5], &p.embedding).unwrap();
        assert_eq!(tape.shape(e.rows), (4, 16));
        assert!(!e.truncated);
        let e = embed(&mut tape, &[3; 9], &p.embedding).unwrap();
        assert_eq!(tape.shape(e.rows), (7, 16));
        assert!(e.truncated);
        assert!(matches!(
            embed(&mut tape, &[12], &p.embedding),
            Err(Error::Vocabulary { id: 12, size: 12 })
        ));
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_is_noisy() {
        let (store, p, _) = micro(2);
        let ids = [3, 7, 4, 9];
        assert_eq!(run(&store, &p, &ids, None), run(&store, &p, &ids, None));
        let a = run(&store, &p, &ids, Some(&mut Rng::new(5, 0)));
        let b = run(&store, &p, &ids, Some(&mut Rng::new(5, 0)));
        assert_eq!(a, b);
        assert_ne!(a, run(&store, &p, &ids, None));
    }

    #[test]
    fn zeroed_branches_reduce_to_final_norm() {
        let (mut store, p, _) = micro(3);
        for layer in &p.layers {
            for id in [
                layer.w_o.weight,
                layer.w_o.bias,
                layer.ffn.outer.weight,
                layer.ffn.outer.bias,
            ] {
                let (r, c) = store.get(id).shape();
                store.set(id, Matrix::zeros(r, c)).unwrap();
            }
        }
        let ids = [5, 6, 7];
        let mut tape = Tape::new(&store);
        let e = embed(&mut tape, &ids, &p.embedding).unwrap();
        let x = tape.value(e.rows).clone();
        let out = encoder_forward(&mut tape, e.rows, &e.keep, &p, None).unwrap();
        let g = store.get(p.final_norm.gain).as_slice();
        let b = store.get(p.final_norm.bias).as_slice();
        for r in 0..x.rows() {
            let expected = crate::numerics::layer_norm(x.row(r), g, b, 1e-5).unwrap();
            assert_eq!(tape.value(out.hidden).row(r), expected.as_slice());
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_skip_padding() {
        let (store, p, _) = micro(4);
        let mut tape = Tape::new(&store);
        let e = embed(&mut tape, &[3, PAD_ID, 8], &p.embedding).unwrap();
        let out = encoder_forward(&mut tape, e.rows, &e.keep, &p, None).unwrap();
        for layer in &out.attention {
            for a in layer {
                let m = tape.value(*a);
                for r in 0..m.rows() {
                    assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert_eq!(m.row(r)[2], 0.0);
                }
            }
        }
    }

    #[test]
    fn cls_is_permutation_invariant_without_positions() {
        let (mut store, p, _) = micro(5);
        let (r, c) = store.get(p.embedding.positional_table).shape();
        store.set(p.embedding.positional_table, Matrix::zeros(r, c)).unwrap();
        let a = run(&store, &p, &[3, 4, 5, 6], None);
        let b = run(&store, &p, &[6, 4, 3, 5], None);
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn head_with_zero_weights_returns_bias() {
        let (mut store, p, _) = micro(6);
        store.set(p.head.weight, Matrix::zeros(16, 3)).unwrap();
        store
            .set(p.head.bias, Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new(&store);
        let e = embed(&mut tape, &[4, 5], &p.embedding).unwrap();
        let out = encoder_forward(&mut tape, e.rows, &e.keep, &p, None).unwrap();
        let cls = extract_cls(&mut tape, out.hidden).unwrap();
        let logits = classify(&mut tape, cls, &p.head).unwrap();
        assert_eq!(tape.value(logits).as_slice(), &[0.5, -1.0, 2.0]);
        assert_eq!(argmax(tape.value(logits).as_slice()), 2);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn encoder_and_head_match_oracle() {
        let (store, p, _) = micro(7);
        let ids = [3, 9, PAD_ID, 4, 11];
        let mut tape = Tape::new(&store);
        let e = embed(&mut tape, &ids, &p.embedding).unwrap();
        let out = encoder_forward(&mut tape, e.rows, &e.keep, &p, None).unwrap();
        let cls = extract_cls(&mut tape, out.hidden).unwrap();
        let logits = classify(&mut tape, cls, &p.head).unwrap();
        let weights = oracle::EncoderWeights::from_store(&store, p.layers.len(), p.heads);
        let x = oracle::embed(&ids, &weights);
        let h = oracle::encoder(&x, &e.keep, &weights);
        assert!(oracle::max_abs_diff(tape.value(out.hidden), &h) < 1e-10);
        let y = oracle::classify(&h[0], &weights);
        assert!(oracle::max_abs_diff(tape.value(logits), &[y]) < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, p, _) = micro(8);
        let ids = [3, 9, 4, 11, 5];
        let loss_of = |st: &ParamStore<f64>| -> Result<(f64, crate::params::Grads<f64>)> {
            let mut tape = Tape::new(st);
            let e = embed(&mut tape, &ids, &p.embedding)?;
            let out = encoder_forward(&mut tape, e.rows, &e.keep, &p, None)?;
            let cls = extract_cls(&mut tape, out.hidden)?;
            let logits = classify(&mut tape, cls, &p.head)?;
            let loss = tape.cross_entropy(logits, 1)?;
            Ok((tape.value(loss).as_slice()[0], tape.backward(loss)?))
        };
        let (_, grads) = loss_of(&store).unwrap();
        let report = gradient_check(&store, &grads, 1e-6, |st| loss_of(st).map(|r| r.0)).unwrap();
        assert_eq!(report.len(), store.len());
        for r in report {
            assert!(
                r.relative_error < 1e-5,
                "{} relative error {}",
                r.name,
                r.relative_error
            );
        }
    }
}
