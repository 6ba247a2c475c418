//! The sequential reference trainer and the batch-parallel trainer.
//!
//! Batched training per corpus: every sentence of a batch is fused against
//! the same memory snapshot, forwards run in parallel, one optimizer step is
//! taken on the mean batch loss, then memory advances through the batch's
//! hidden states in sentence order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedCorpus, EncodedSentence};
use crate::error::{Error, Result};
use crate::model::{ResFormer, SentenceGrad};
use crate::numerics::rng::{mix_stream, stable_hash};
use crate::numerics::{Matrix, Rng};
use crate::params::Grads;
use crate::reservoir::{GroupMemory, InitMode};
use crate::scalar::Scalar;

use super::corpus_memory_rng;
use super::optim::{optimizer_step, AdamWConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `None` disables clipping
    pub clip_norm: Option<f64>,
    /// evaluate on validation data every this many epochs
    pub eval_every: usize,
    /// reshuffle corpus order every epoch
    pub shuffle_corpora: bool,
    /// apply attention dropout while training
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            clip_norm: Some(1.0),
            eval_every: 1,
            shuffle_corpora: true,
            dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                out.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.eval_every == 0 {
            out.push("eval_every must be at least 1".into());
        }
        out
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        }
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub corpus_id: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochTrace {
    pub steps: Vec<StepRecord>,
    /// per-sentence losses in corpus processing order
    pub sentence_losses: Vec<f64>,
    pub mean_loss: f64,
}

/// Instrumentation hooks. `sentence` is the index within the corpus.
pub trait TrainObserver<T: Scalar> {
    fn on_corpus_start(&mut self, _corpus_id: &str, _memory: &GroupMemory<T>) {}
    /// Memory tokens the fusion block of `sentence` actually consumed.
    fn on_fusion(&mut self, _corpus_id: &str, _sentence: usize, _memory_tokens: &Matrix<T>) {}
    fn on_memory_advance(&mut self, _corpus_id: &str, _sentence: usize, _memory: &GroupMemory<T>) {}
    fn on_step(&mut self, _record: &StepRecord) {}
}

pub struct NoObserver;

impl<T: Scalar> TrainObserver<T> for NoObserver {}

/// Dropout stream of one sentence, independent of how it is batched.
pub fn sentence_rng(seed: u64, epoch: usize, corpus_id: &str, index: usize) -> Rng {
    let stream = mix_stream(mix_stream(stable_hash(corpus_id), epoch as u64), index as u64);
    Rng::new(seed, stream)
}

pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    optimizer: OptimizerState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &ResFormer<T>, config: TrainConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(Self {
            optimizer: OptimizerState::new(model.store()),
            config,
        })
    }

    /// Continues from saved optimizer moments.
    pub fn resume(config: TrainConfig, optimizer: OptimizerState<T>) -> Self {
        Self { config, optimizer }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer_state(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    /// Corpus visiting order for `epoch`.
    pub fn corpus_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.config.shuffle_corpora {
            Rng::new(self.config.seed, mix_stream(0x5EED_C0DE, epoch as u64)).shuffle(&mut order);
        }
        order
    }

    fn sentence_grad(
        &self,
        model: &ResFormer<T>,
        epoch: usize,
        corpus_id: &str,
        index: usize,
        sentence: &EncodedSentence,
        memory: &GroupMemory<T>,
    ) -> Result<SentenceGrad<T>> {
        let mut rng = sentence_rng(self.config.seed, epoch, corpus_id, index);
        let dropout = self.config.dropout.then_some(&mut rng);
        model.loss_and_grad(&sentence.ids, sentence.label, memory, dropout)
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        model: &mut ResFormer<T>,
        grads: &Grads<T>,
        loss: f64,
        epoch: usize,
        corpus_id: &str,
        observer: &mut dyn TrainObserver<T>,
        trace: &mut EpochTrace,
    ) -> Result<()> {
        optimizer_step(model.store_mut(), grads, &mut self.optimizer, &self.config.optimizer())?;
        let record = StepRecord {
            step: self.optimizer.step,
            epoch,
            corpus_id: corpus_id.to_string(),
            loss,
            lr: self.config.learning_rate,
        };
        observer.on_step(&record);
        trace.steps.push(record);
        Ok(())
    }

    /// Reference implementation: one sentence at a time, one optimizer step
    /// per sentence.
    pub fn train_epoch_sequential(
        &mut self,
        model: &mut ResFormer<T>,
        data: &[EncodedCorpus],
        epoch: usize,
        observer: &mut dyn TrainObserver<T>,
    ) -> Result<EpochTrace> {
        let mut trace = EpochTrace::default();
        for ci in self.corpus_order(data.len(), epoch) {
            let corpus = &data[ci];
            let mut memory = model.new_memory(InitMode::SeededRandom, &corpus_memory_rng(self.config.seed, &corpus.id));
            observer.on_corpus_start(&corpus.id, &memory);
            for (i, sentence) in corpus.sentences.iter().enumerate() {
                let sg = self.sentence_grad(model, epoch, &corpus.id, i, sentence, &memory)?;
                observer.on_fusion(&corpus.id, i, &sg.memory_tokens);
                let loss = sg.loss.to_f64_lossy();
                trace.sentence_losses.push(loss);
                self.step(model, &sg.grads, loss, epoch, &corpus.id, observer, &mut trace)?;
                model.advance_memory(&mut memory, &sg.output.hidden)?;
                observer.on_memory_advance(&corpus.id, i, &memory);
            }
        }
        trace.mean_loss = mean(&trace.sentence_losses);
        Ok(trace)
    }

    /// Batch-parallel trainer. Batches are cut per corpus, so the last batch
    /// of a corpus may be short.
    pub fn train_epoch_batched(
        &mut self,
        model: &mut ResFormer<T>,
        data: &[EncodedCorpus],
        epoch: usize,
        observer: &mut dyn TrainObserver<T>,
    ) -> Result<EpochTrace> {
        let b = self.config.batch_size;
        let mut trace = EpochTrace::default();
        for ci in self.corpus_order(data.len(), epoch) {
            let corpus = &data[ci];
            let mut memory = model.new_memory(InitMode::SeededRandom, &corpus_memory_rng(self.config.seed, &corpus.id));
            observer.on_corpus_start(&corpus.id, &memory);
            for (bi, batch) in corpus.sentences.chunks(b).enumerate() {
                let start = bi * b;
                let frozen: &ResFormer<T> = model;
                let snapshot = &memory;
                let results: Vec<SentenceGrad<T>> = batch
                    .par_iter()
                    .enumerate()
                    .map(|(j, s)| self.sentence_grad(frozen, epoch, &corpus.id, start + j, s, snapshot))
                    .collect::<Result<_>>()?;

                let mut grads = Grads::for_store(model.store());
                let mut batch_loss = 0.0;
                for (j, r) in results.iter().enumerate() {
                    observer.on_fusion(&corpus.id, start + j, &r.memory_tokens);
                    grads.merge(&r.grads);
                    let loss = r.loss.to_f64_lossy();
                    batch_loss += loss;
                    trace.sentence_losses.push(loss);
                }
                let n = results.len();
                if n > 1 {
                    grads.scale(T::of(1.0 / n as f64));
                }
                self.step(
                    model,
                    &grads,
                    batch_loss / n as f64,
                    epoch,
                    &corpus.id,
                    observer,
                    &mut trace,
                )?;
                for (j, r) in results.iter().enumerate() {
                    model.advance_memory(&mut memory, &r.output.hidden)?;
                    observer.on_memory_advance(&corpus.id, start + j, &memory);
                }
            }
        }
        trace.mean_loss = mean(&trace.sentence_losses);
        Ok(trace)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
