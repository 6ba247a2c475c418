//! The combination operator: cross-attention from sentence embeddings onto
//! reservoir memory tokens, plus the concatenation and addition fallbacks
//! used for ablations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{init_weight, FeedForward, LayerNorm, Linear};
use crate::numerics::Rng;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum CombinationMethod {
    #[default]
    #[serde(rename = "cross_attention")]
    CrossAttention,
    #[serde(rename = "concat")]
    Concatenation,
    #[serde(rename = "add")]
    ElementwiseAddition,
}

impl CombinationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CombinationMethod::CrossAttention => "cross_attention",
            CombinationMethod::Concatenation => "concat",
            CombinationMethod::ElementwiseAddition => "add",
        }
    }
}

impl std::str::FromStr for CombinationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(CombinationMethod::CrossAttention),
            "concat" => Ok(CombinationMethod::Concatenation),
            "add" => Ok(CombinationMethod::ElementwiseAddition),
            other => Err(Error::Config(format!(
                "unknown combine method {other:?} (expected cross_attention, concat or add)"
            ))),
        }
    }
}

impl std::fmt::Display for CombinationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossAttentionParams {
    /// d × d_k
    pub w_q: ParamId,
    /// m × d_k
    pub w_k: ParamId,
    /// m × d
    pub w_v: ParamId,
    pub d_k: usize,
    pub ffn: FeedForward,
    pub norm_in: LayerNorm,
    pub norm_out: LayerNorm,
}

/// Trainable tensors of the active combination method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionParams {
    CrossAttention(CrossAttentionParams),
    /// (d + m) → d
    Concatenation(Linear),
    /// m → d
    ElementwiseAddition(Linear),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    /// query (embedding) width d
    pub model_dim: usize,
    /// memory token width m
    pub memory_dim: usize,
    pub key_dim: usize,
    pub ffn_hidden: usize,
}

impl FusionParams {
    pub fn init<T: Scalar>(
        method: CombinationMethod,
        dims: FusionDims,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let FusionDims {
            model_dim: d,
            memory_dim: m,
            key_dim: d_k,
            ffn_hidden,
        } = dims;
        Ok(match method {
            CombinationMethod::CrossAttention => FusionParams::CrossAttention(CrossAttentionParams {
                w_q: init_weight(store, rng, "fusion.w_q".into(), d, d_k)?,
                w_k: init_weight(store, rng, "fusion.w_k".into(), m, d_k)?,
                w_v: init_weight(store, rng, "fusion.w_v".into(), m, d)?,
                d_k,
                ffn: FeedForward::init(store, rng, "fusion.ffn", d, ffn_hidden)?,
                norm_in: LayerNorm::init(store, "fusion.norm_in", d),
                norm_out: LayerNorm::init(store, "fusion.norm_out", d),
            }),
            CombinationMethod::Concatenation => {
                FusionParams::Concatenation(Linear::init(store, rng, "fusion.concat", d + m, d)?)
            }
            CombinationMethod::ElementwiseAddition => {
                FusionParams::ElementwiseAddition(Linear::init(store, rng, "fusion.add", m, d)?)
            }
        })
    }

    pub fn method(&self) -> CombinationMethod {
        match self {
            FusionParams::CrossAttention(_) => CombinationMethod::CrossAttention,
            FusionParams::Concatenation(_) => CombinationMethod::Concatenation,
            FusionParams::ElementwiseAddition(_) => CombinationMethod::ElementwiseAddition,
        }
    }
}

/// Intermediate nodes of one cross-attention pass.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionVars {
    pub scores: Var,
    pub attention: Var,
    pub context: Var,
    pub output: Var,
}

fn check_memory<T: Scalar>(tape: &Tape<'_, T>, e: Var, o: Var, memory_dim: usize) -> Result<()> {
    let (rows, _) = tape.shape(o);
    if rows == 0 {
        return Err(Error::EmptyMemory);
    }
    if tape.shape(o).1 != memory_dim {
        return Err(Error::dim(format!(
            "memory tokens have width {}, fusion expects {memory_dim}",
            tape.shape(o).1
        )));
    }
    if tape.shape(e).0 == 0 {
        return Err(Error::dim("no query tokens"));
    }
    Ok(())
}

/// `K = (E W_Q)(O W_K)ᵀ / sqrt(d_k)`, `A = softmax_rows(K)`, `C = A (O W_V)`,
/// `R = LN_in(C + E)`, output `LN_out(FFN(R) + R)`.
pub fn cross_attention_parts<T: Scalar>(
    tape: &mut Tape<'_, T>,
    e: Var,
    o: Var,
    p: &CrossAttentionParams,
) -> Result<CrossAttentionVars> {
    let memory_dim = tape.params().get(p.w_k).rows();
    check_memory(tape, e, o, memory_dim)?;
    let w_q = tape.param(p.w_q);
    let w_k = tape.param(p.w_k);
    let w_v = tape.param(p.w_v);
    let q = tape.matmul(e, w_q)?;
    let k = tape.matmul(o, w_k)?;
    let v = tape.matmul(o, w_v)?;
    let raw = tape.matmul_t(q, k)?;
    let scores = tape.scale(raw, T::one() / T::of(p.d_k as f64).sqrt());
    let attention = tape.softmax_rows(scores);
    let context = tape.matmul(attention, v)?;
    let residual = tape.add(context, e)?;
    let r = p.norm_in.forward(tape, residual)?;
    let f = p.ffn.forward(tape, r)?;
    let sum = tape.add(f, r)?;
    let output = p.norm_out.forward(tape, sum)?;
    Ok(CrossAttentionVars {
        scores,
        attention,
        context,
        output,
    })
}

pub fn cross_attention_combine<T: Scalar>(
    tape: &mut Tape<'_, T>,
    e: Var,
    o: Var,
    p: &CrossAttentionParams,
) -> Result<Var> {
    Ok(cross_attention_parts(tape, e, o, p)?.output)
}

/// `[E | mean(O)] P + b`, with the pooled memory tiled over every token.
pub fn concat_combine<T: Scalar>(tape: &mut Tape<'_, T>, e: Var, o: Var, proj: &Linear) -> Result<Var> {
    let (d_in, _) = tape.params().get(proj.weight).shape();
    let d = tape.shape(e).1;
    check_memory(tape, e, o, d_in.saturating_sub(d))?;
    let pooled = tape.mean_rows(o);
    let tiled = tape.repeat_rows(pooled, tape.shape(e).0)?;
    let joined = tape.concat_cols(&[e, tiled])?;
    proj.forward(tape, joined)
}

/// `E + (mean(O) P + b)` broadcast over every token.
pub fn add_combine<T: Scalar>(tape: &mut Tape<'_, T>, e: Var, o: Var, proj: &Linear) -> Result<Var> {
    let (m, _) = tape.params().get(proj.weight).shape();
    check_memory(tape, e, o, m)?;
    let pooled = tape.mean_rows(o);
    let shift = proj.forward(tape, pooled)?;
    tape.add_row(e, shift)
}

/// Dispatches on `method`; the parameters must belong to that method.
pub fn combine<T: Scalar>(
    tape: &mut Tape<'_, T>,
    e: Var,
    o: Var,
    method: CombinationMethod,
    params: &FusionParams,
) -> Result<Var> {
    match (method, params) {
        (CombinationMethod::CrossAttention, FusionParams::CrossAttention(p)) => cross_attention_combine(tape, e, o, p),
        (CombinationMethod::Concatenation, FusionParams::Concatenation(p)) => concat_combine(tape, e, o, p),
        (CombinationMethod::ElementwiseAddition, FusionParams::ElementwiseAddition(p)) => add_combine(tape, e, o, p),
        (method, params) => Err(Error::Config(format!(
            "combine method {method} requested but parameters are for {}",
            params.method()
        ))),
    }
}
