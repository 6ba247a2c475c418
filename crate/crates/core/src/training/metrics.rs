use serde::{Deserialize, Serialize};

use crate::data::EncodedCorpus;
use crate::error::{Error, Result};
use crate::model::ResFormer;
use crate::scalar::Scalar;

use super::corpus_memory_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub loss: f64,
    pub count: usize,
}

impl EvalReport {
    /// Precision and recall are 0 for classes that are never predicted or
    /// never present.
    pub fn from_predictions(predicted: &[usize], actual: &[usize], num_classes: usize, loss: f64) -> Result<Self> {
        if actual.is_empty() {
            return Err(Error::Evaluation("no labeled sentences to evaluate".into()));
        }
        if predicted.len() != actual.len() {
            return Err(Error::dim("prediction and label counts differ"));
        }
        let mut tp = vec![0usize; num_classes];
        let mut pred_count = vec![0usize; num_classes];
        let mut support = vec![0usize; num_classes];
        for (&p, &a) in predicted.iter().zip(actual) {
            if p >= num_classes || a >= num_classes {
                return Err(Error::Label {
                    label: p.max(a),
                    classes: num_classes,
                });
            }
            pred_count[p] += 1;
            support[a] += 1;
            if p == a {
                tp[a] += 1;
            }
        }
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let per_class: Vec<ClassMetrics> = (0..num_classes)
            .map(|c| {
                let precision = ratio(tp[c], pred_count[c]);
                let recall = ratio(tp[c], support[c]);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support: support[c],
                }
            })
            .collect();
        let n = actual.len() as f64;
        let weighted_f1 = per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / n;
        Ok(Self {
            accuracy: tp.iter().sum::<usize>() as f64 / n,
            weighted_f1,
            per_class,
            loss,
            count: actual.len(),
        })
    }
}

/// Report plus per-corpus predictions, in corpus and sentence order.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Vec<usize>>,
}

/// Streaming pass in corpus order: memory advances, parameters do not,
/// dropout is off.
pub fn evaluate<T: Scalar>(model: &ResFormer<T>, data: &[EncodedCorpus], seed: u64) -> Result<Evaluation> {
    let per_corpus: Vec<Result<(Vec<usize>, f64)>> = {
        use rayon::prelude::*;
        data.par_iter()
            .map(|corpus| {
                let mut memory = model.new_memory(
                    crate::reservoir::InitMode::SeededRandom,
                    &corpus_memory_rng(seed, &corpus.id),
                );
                let mut predicted = Vec::with_capacity(corpus.sentences.len());
                let mut loss = 0.0;
                for s in &corpus.sentences {
                    let out = model.forward(&s.ids, &memory, None)?;
                    loss +=
                        super::loss::cross_entropy_loss(std::slice::from_ref(&out.logits), &[s.label])?.to_f64_lossy();
                    predicted.push(out.predicted_class);
                    model.advance_memory(&mut memory, &out.hidden)?;
                }
                Ok((predicted, loss))
            })
            .collect()
    };
    let mut predictions = Vec::with_capacity(data.len());
    let mut total_loss = 0.0;
    for r in per_corpus {
        let (p, l) = r?;
        predictions.push(p);
        total_loss += l;
    }
    let flat_pred: Vec<usize> = predictions.iter().flatten().copied().collect();
    let flat_true: Vec<usize> = data.iter().flat_map(|c| c.sentences.iter().map(|s| s.label)).collect();
    let count = flat_true.len().max(1) as f64;
    let report = EvalReport::from_predictions(&flat_pred, &flat_true, model.num_classes(), total_loss / count)?;
    Ok(Evaluation { report, predictions })
}
