//! Loss, optimizer, trainers, evaluation metrics and the reservoir
//! hyperparameter search.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod powell;
pub mod trainer;

use crate::numerics::rng::stable_hash;
use crate::numerics::Rng;

pub use loss::cross_entropy_loss;
pub use metrics::{evaluate, ClassMetrics, EvalReport, Evaluation};
pub use optim::{optimizer_step, AdamWConfig, OptimizerState, StepInfo};
pub use powell::{powell_search, PowellOptions, PowellResult};
pub use trainer::{sentence_rng, EpochTrace, NoObserver, StepRecord, TrainConfig, TrainObserver, Trainer};

/// Initial-state stream of a corpus: a pure function of the run seed and the
/// corpus identifier, so it is identical across epochs and corpus orders.
pub fn corpus_memory_rng(seed: u64, corpus_id: &str) -> Rng {
    Rng::new(seed, stable_hash(corpus_id))
}
