//! Straight-line reference evaluations used by tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` with compensated sums and
//! shares no arithmetic with the tape, the matrix type or the layer code.
//! Weights are looked up by registry name.

use crate::fusion::CombinationMethod;
use crate::numerics::{gaussian_matrix, Matrix, Rng};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub type Rows = Vec<Vec<f64>>;

const EPS: f64 = 1e-5;

pub fn rows<T: Scalar>(m: &Matrix<T>) -> Rows {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

pub fn max_abs_diff<T: Scalar>(m: &Matrix<T>, expected: &[Vec<f64>]) -> f64 {
    assert_eq!(m.rows(), expected.len(), "row count");
    let mut worst: f64 = 0.0;
    for (r, row) in expected.iter().enumerate() {
        assert_eq!(m.cols(), row.len(), "column count");
        for (a, b) in m.row(r).iter().zip(row) {
            worst = worst.max((a.to_f64_lossy() - b).abs());
        }
    }
    worst
}

/// Neumaier-compensated sum.
pub fn fsum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn get(store: &ParamStore<f64>, name: &str) -> Rows {
    let id = store.find(name).unwrap_or_else(|| panic!("no tensor named {name}"));
    rows(store.get(id))
}

fn vec_of(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    get(store, name).remove(0)
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Rows {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| fsum(row.iter().zip(b).map(|(x, br)| x * br[j])))
                .collect()
        })
        .collect()
}

fn transpose(a: &[Vec<f64>]) -> Rows {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn add_mat(a: &[Vec<f64>], b: &[Vec<f64>]) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_bias(a: &[Vec<f64>], bias: &[f64]) -> Rows {
    a.iter()
        .map(|r| r.iter().zip(bias).map(|(x, b)| x + b).collect())
        .collect()
}

fn softmax_kept(v: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = v
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v
        .iter()
        .zip(keep)
        .map(|(x, k)| if *k { (x - max).exp() } else { 0.0 })
        .collect();
    let s = fsum(e.iter().copied());
    e.iter().map(|x| x / s).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    softmax_kept(v, &vec![true; v.len()])
}

pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = fsum(v.iter().copied()) / n;
    let var = fsum(v.iter().map(|x| (x - mean) * (x - mean))) / n;
    let inv = 1.0 / (var + EPS).sqrt();
    v.iter()
        .zip(gain)
        .zip(bias)
        .map(|((x, g), b)| (x - mean) * inv * g + b)
        .collect()
}

fn layer_norm_rows(a: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Rows {
    a.iter().map(|r| layer_norm(r, gain, bias)).collect()
}

fn relu(a: &[Vec<f64>]) -> Rows {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

struct Ffn {
    w1: Rows,
    b1: Vec<f64>,
    w2: Rows,
    b2: Vec<f64>,
}

impl Ffn {
    fn load(store: &ParamStore<f64>, name: &str) -> Self {
        Self {
            w1: get(store, &format!("{name}.inner.weight")),
            b1: vec_of(store, &format!("{name}.inner.bias")),
            w2: get(store, &format!("{name}.outer.weight")),
            b2: vec_of(store, &format!("{name}.outer.bias")),
        }
    }

    fn apply(&self, x: &[Vec<f64>]) -> Rows {
        let h = relu(&add_bias(&matmul(x, &self.w1), &self.b1));
        add_bias(&matmul(&h, &self.w2), &self.b2)
    }
}

pub struct FusionWeights {
    w_q: Rows,
    w_k: Rows,
    w_v: Rows,
    ffn: Option<Ffn>,
    norm_in: (Vec<f64>, Vec<f64>),
    norm_out: (Vec<f64>, Vec<f64>),
    proj: Option<(Rows, Vec<f64>)>,
}

impl FusionWeights {
    pub fn cross(store: &ParamStore<f64>) -> Self {
        Self {
            w_q: get(store, "fusion.w_q"),
            w_k: get(store, "fusion.w_k"),
            w_v: get(store, "fusion.w_v"),
            ffn: Some(Ffn::load(store, "fusion.ffn")),
            norm_in: (
                vec_of(store, "fusion.norm_in.gain"),
                vec_of(store, "fusion.norm_in.bias"),
            ),
            norm_out: (
                vec_of(store, "fusion.norm_out.gain"),
                vec_of(store, "fusion.norm_out.bias"),
            ),
            proj: None,
        }
    }

    pub fn projection(store: &ParamStore<f64>, method: CombinationMethod) -> Self {
        let name = match method {
            CombinationMethod::Concatenation => "fusion.concat",
            CombinationMethod::ElementwiseAddition => "fusion.add",
            CombinationMethod::CrossAttention => panic!("cross attention has no projection"),
        };
        Self {
            w_q: Vec::new(),
            w_k: Vec::new(),
            w_v: Vec::new(),
            ffn: None,
            norm_in: (Vec::new(), Vec::new()),
            norm_out: (Vec::new(), Vec::new()),
            proj: Some((
                get(store, &format!("{name}.weight")),
                vec_of(store, &format!("{name}.bias")),
            )),
        }
    }
}

pub fn cross_attention(e: &[Vec<f64>], o: &[Vec<f64>], w: &FusionWeights) -> Rows {
    let q = matmul(e, &w.w_q);
    let k = matmul(o, &w.w_k);
    let v = matmul(o, &w.w_v);
    let scale = 1.0 / (w.w_q[0].len() as f64).sqrt();
    let scores: Rows = matmul(&q, &transpose(&k))
        .into_iter()
        .map(|r| r.into_iter().map(|s| s * scale).collect())
        .collect();
    let attn: Rows = scores.iter().map(|r| softmax(r)).collect();
    let context = matmul(&attn, &v);
    let r = layer_norm_rows(&add_mat(&context, e), &w.norm_in.0, &w.norm_in.1);
    let f = w.ffn.as_ref().expect("cross-attention weights").apply(&r);
    layer_norm_rows(&add_mat(&f, &r), &w.norm_out.0, &w.norm_out.1)
}

fn mean_row(o: &[Vec<f64>]) -> Vec<f64> {
    (0..o[0].len())
        .map(|j| fsum(o.iter().map(|r| r[j])) / o.len() as f64)
        .collect()
}

pub fn concat(e: &[Vec<f64>], o: &[Vec<f64>], w: &FusionWeights) -> Rows {
    let pooled = mean_row(o);
    let joined: Rows = e.iter().map(|r| r.iter().chain(&pooled).copied().collect()).collect();
    let (p, b) = w.proj.as_ref().expect("projection weights");
    add_bias(&matmul(&joined, p), b)
}

pub fn add(e: &[Vec<f64>], o: &[Vec<f64>], w: &FusionWeights) -> Rows {
    let (p, b) = w.proj.as_ref().expect("projection weights");
    let shift = add_bias(&matmul(&[mean_row(o)], p), b).remove(0);
    add_bias(e, &shift)
}

struct LayerWeights {
    norm1: (Vec<f64>, Vec<f64>),
    w_q: Rows,
    w_k: Rows,
    w_v: Rows,
    w_o: Rows,
    b_o: Vec<f64>,
    norm2: (Vec<f64>, Vec<f64>),
    ffn: Ffn,
}

pub struct EncoderWeights {
    tokens: Rows,
    positions: Rows,
    layers: Vec<LayerWeights>,
    final_norm: (Vec<f64>, Vec<f64>),
    head_w: Rows,
    head_b: Vec<f64>,
    heads: usize,
}

impl EncoderWeights {
    pub fn from_store(store: &ParamStore<f64>, layers: usize, heads: usize) -> Self {
        let norm = |n: &str| (vec_of(store, &format!("{n}.gain")), vec_of(store, &format!("{n}.bias")));
        Self {
            tokens: get(store, "embedding.tokens"),
            positions: get(store, "embedding.positions"),
            layers: (0..layers)
                .map(|i| {
                    let p = format!("encoder.{i}");
                    LayerWeights {
                        norm1: norm(&format!("{p}.attn_norm")),
                        w_q: get(store, &format!("{p}.w_q")),
                        w_k: get(store, &format!("{p}.w_k")),
                        w_v: get(store, &format!("{p}.w_v")),
                        w_o: get(store, &format!("{p}.w_o.weight")),
                        b_o: vec_of(store, &format!("{p}.w_o.bias")),
                        norm2: norm(&format!("{p}.ffn_norm")),
                        ffn: Ffn::load(store, &format!("{p}.ffn")),
                    }
                })
                .collect(),
            final_norm: norm("encoder.final_norm"),
            head_w: get(store, "head.weight"),
            head_b: vec_of(store, "head.bias"),
            heads,
        }
    }
}

/// CLS (id 2) then the tokens, each plus its positional row.
pub fn embed(ids: &[usize], w: &EncoderWeights) -> Rows {
    std::iter::once(&crate::stm::CLS_ID)
        .chain(ids)
        .enumerate()
        .map(|(j, &id)| w.tokens[id].iter().zip(&w.positions[j]).map(|(a, b)| a + b).collect())
        .collect()
}

fn columns(a: &[Vec<f64>], start: usize, len: usize) -> Rows {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn encoder(x: &[Vec<f64>], keep: &[bool], w: &EncoderWeights) -> Rows {
    let mut h: Rows = x.to_vec();
    let d = h[0].len();
    let d_h = d / w.heads;
    for layer in &w.layers {
        let n = layer_norm_rows(&h, &layer.norm1.0, &layer.norm1.1);
        let q = matmul(&n, &layer.w_q);
        let k = matmul(&n, &layer.w_k);
        let v = matmul(&n, &layer.w_v);
        let mut joined: Rows = vec![Vec::with_capacity(d); h.len()];
        for head in 0..w.heads {
            let (qh, kh, vh) = (
                columns(&q, head * d_h, d_h),
                columns(&k, head * d_h, d_h),
                columns(&v, head * d_h, d_h),
            );
            let scale = 1.0 / (d_h as f64).sqrt();
            let attn: Rows = matmul(&qh, &transpose(&kh))
                .iter()
                .map(|r| softmax_kept(&r.iter().map(|s| s * scale).collect::<Vec<_>>(), keep))
                .collect();
            for (row, ctx) in joined.iter_mut().zip(matmul(&attn, &vh)) {
                row.extend(ctx);
            }
        }
        let attn_out = add_bias(&matmul(&joined, &layer.w_o), &layer.b_o);
        h = add_mat(&h, &attn_out);
        let n = layer_norm_rows(&h, &layer.norm2.0, &layer.norm2.1);
        h = add_mat(&h, &layer.ffn.apply(&n));
    }
    layer_norm_rows(&h, &w.final_norm.0, &w.final_norm.1)
}

pub fn classify(h_cls: &[f64], w: &EncoderWeights) -> Vec<f64> {
    add_bias(&matmul(&[h_cls.to_vec()], &w.head_w), &w.head_b).remove(0)
}

/// Mean of `log Σ exp(z) − z[label]`, with the log-sum-exp shifted by the max.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let per: Vec<f64> = logits
        .iter()
        .zip(labels)
        .map(|(z, &l)| {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + fsum(z.iter().map(|v| (v - m).exp())).ln() - z[l]
        })
        .collect();
    fsum(per) / logits.len() as f64
}

/// `(1−α)x + α·tanh(W_in h + θ + W x)` written out coordinate by coordinate.
pub fn reservoir_step(w: &[Vec<f64>], w_in: &[Vec<f64>], theta: &[f64], alpha: f64, x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let drive = fsum(
                w_in[i]
                    .iter()
                    .zip(h)
                    .map(|(a, b)| a * b)
                    .chain(w[i].iter().zip(x).map(|(a, b)| a * b))
                    .chain(std::iter::once(theta[i])),
            );
            (1.0 - alpha) * x[i] + alpha * drive.tanh()
        })
        .collect()
}

/// Replaces every layer-norm gain and every bias with seeded non-trivial
/// values so that oracle comparisons exercise them.
pub fn jitter_norms(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng::new(seed, 0x0A11);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let base = if name.ends_with(".gain") {
            1.0
        } else if name.ends_with(".bias") || name.ends_with("b_out") {
            0.0
        } else {
            continue;
        };
        let (r, c) = store.get(id).shape();
        store
            .set(
                id,
                gaussian_matrix(&mut rng, r, c, base, 0.2).expect("non-empty tensor"),
            )
            .expect("same shape");
    }
}
