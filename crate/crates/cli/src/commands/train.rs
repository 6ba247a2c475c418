//! Training driver: batched epochs, periodic validation, metrics log and
//! checkpoints.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use resformer::data::corpus::load_jsonl;
use resformer::data::vocab::Vocab;
use resformer::data::{encode, label_set, Corpus, EncodedCorpus};
use resformer::model::ResFormer;
use resformer::numerics::Matrix;
use resformer::reservoir::GroupMemory;
use resformer::training::{evaluate, EvalReport, StepRecord, TrainObserver, Trainer};
use resformer::Scalar;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Precision, RunConfig};
use crate::error::{io_error, CliError, CliResult};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Largest tolerated per-coordinate deviation of the B=1 reference check.
pub const REFERENCE_TOLERANCE: f64 = 1e-10;
/// Corpora replayed by the reference check.
const REFERENCE_CORPORA: usize = 3;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub reference_check: bool,
}

/// Saved alongside the tensors so a checkpoint is self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub labels: Vec<String>,
    pub vocab: Vec<String>,
    pub epoch: usize,
    pub config: RunConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_step: u64,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub final_val: Option<EvalReport>,
    pub test: Option<EvalReport>,
    pub reference_max_deviation: Option<f64>,
}

struct Prepared {
    labels: Vec<String>,
    vocab: Vocab,
    train: Vec<EncodedCorpus>,
    val: Vec<EncodedCorpus>,
    test: Option<Vec<EncodedCorpus>>,
}

fn load(path: &Option<PathBuf>, what: &str) -> CliResult<Vec<Corpus>> {
    let path = path
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("data.{what} is required")))?;
    Ok(load_jsonl(path)?)
}

fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let train = load(&cfg.data.train, "train")?;
    let val = load(&cfg.data.val, "val")?;
    let test = cfg.data.test.as_ref().map(|p| load_jsonl(p)).transpose()?;
    if train.is_empty() {
        return Err(CliError::Data("training set is empty".into()));
    }
    let mut all: Vec<Corpus> = train.iter().chain(&val).cloned().collect();
    all.extend(test.iter().flatten().cloned());
    let labels = label_set(&all);
    if labels.len() < 2 {
        return Err(CliError::Data(format!("need at least two labels, found {labels:?}")));
    }
    let vocab = Vocab::build(&train, cfg.data.min_count);
    Ok(Prepared {
        train: encode(&train, &vocab, &labels)?,
        val: encode(&val, &vocab, &labels)?,
        test: test.map(|t| encode(&t, &vocab, &labels)).transpose()?,
        labels,
        vocab,
    })
}

/// Buffers metric lines so the log is written in step order.
struct StepLog {
    lines: Vec<String>,
}

impl<T: Scalar> TrainObserver<T> for StepLog {
    fn on_step(&mut self, r: &StepRecord) {
        self.lines.push(
            json!({"kind": "step", "step": r.step, "epoch": r.epoch, "corpus_id": r.corpus_id, "loss": r.loss, "lr": r.lr})
                .to_string(),
        );
    }
}

struct MetricsLog {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: PathBuf, append: bool) -> CliResult<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| io_error(&path, e))?;
        Ok(Self { file, path })
    }

    fn write(&mut self, line: &str) -> CliResult<()> {
        writeln!(self.file, "{line}").map_err(|e| io_error(&self.path, e))
    }
}

/// Records every memory state after each advance, per corpus.
#[derive(Default)]
struct Trajectory {
    states: Vec<Vec<f64>>,
    snapshots: Vec<Vec<f64>>,
}

impl<T: Scalar> TrainObserver<T> for Trajectory {
    fn on_fusion(&mut self, _: &str, _: usize, tokens: &Matrix<T>) {
        self.snapshots
            .push(tokens.as_slice().iter().map(|v| v.to_f64_lossy()).collect());
    }

    fn on_memory_advance(&mut self, _: &str, _: usize, memory: &GroupMemory<T>) {
        self.states.push(
            memory
                .states()
                .iter()
                .flat_map(|s| s.x.iter().map(|v| v.to_f64_lossy()))
                .collect(),
        );
    }
}

fn max_deviation(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return None;
        }
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    }
    Some(worst)
}

/// Replays one epoch over the first corpora with the sequential reference
/// and the batched trainer at B=1 and compares states and losses.
pub fn reference_check<T: Scalar>(model: &ResFormer<T>, cfg: &RunConfig, data: &[EncodedCorpus]) -> CliResult<f64> {
    if cfg.train.batch_size != 1 {
        return Err(CliError::Usage(format!(
            "--reference-check needs batch_size 1, got {}",
            cfg.train.batch_size
        )));
    }
    let subset = &data[..data.len().min(REFERENCE_CORPORA)];
    let mut tc = cfg.train.clone();
    tc.shuffle_corpora = false;
    let run = |batched: bool| -> CliResult<(Trajectory, Vec<f64>)> {
        let mut m = model.clone();
        let mut trainer = Trainer::new(&m, tc.clone())?;
        let mut obs = Trajectory::default();
        let trace = if batched {
            trainer.train_epoch_batched(&mut m, subset, 0, &mut obs)?
        } else {
            trainer.train_epoch_sequential(&mut m, subset, 0, &mut obs)?
        };
        Ok((obs, trace.sentence_losses))
    };
    let (seq, seq_loss) = run(false)?;
    let (bat, bat_loss) = run(true)?;
    let deviation = [
        max_deviation(&seq.states, &bat.states),
        max_deviation(&seq.snapshots, &bat.snapshots),
        max_deviation(&[seq_loss], &[bat_loss]),
    ]
    .into_iter()
    .try_fold(0.0f64, |acc, d| d.map(|d| acc.max(d)))
    .ok_or_else(|| CliError::Numerical("reference check: trajectories differ in length".into()))?;
    if !(deviation <= REFERENCE_TOLERANCE) {
        return Err(CliError::Numerical(format!(
            "reference check: batched trainer deviates from the sequential reference by {deviation:e} (> {REFERENCE_TOLERANCE:e})"
        )));
    }
    Ok(deviation)
}

pub fn run(cfg: &RunConfig, opts: &TrainOptions) -> CliResult<TrainSummary> {
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg, opts),
        Precision::F32 => run_typed::<f32>(cfg, opts),
    }
}

fn save<T: Scalar>(path: &Path, model: &ResFormer<T>, trainer: &Trainer<T>, meta: &RunMetadata) -> CliResult<()> {
    let extra = serde_json::to_value(meta).expect("metadata serializes");
    Ok(model.save(path, Some(trainer.optimizer_state()), extra)?)
}

fn run_typed<T: Scalar>(cfg: &RunConfig, opts: &TrainOptions) -> CliResult<TrainSummary> {
    let data = prepare(cfg)?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    data.vocab.write(&out.join(VOCAB_FILE))?;

    let (mut model, mut trainer, start_epoch) = match &opts.resume {
        Some(path) => {
            let loaded = ResFormer::<T>::load(path)?;
            let meta: RunMetadata = serde_json::from_value(loaded.extra)
                .map_err(|e| CliError::Data(format!("{}: checkpoint metadata: {e}", path.display())))?;
            if meta.vocab != data.vocab.tokens() || meta.labels != data.labels {
                return Err(CliError::Data(format!(
                    "{}: checkpoint vocabulary or labels differ from the training data",
                    path.display()
                )));
            }
            let optimizer = loaded
                .optimizer
                .ok_or_else(|| CliError::Data(format!("{}: checkpoint has no optimizer state", path.display())))?;
            (
                loaded.model,
                Trainer::resume(cfg.train.clone(), optimizer),
                meta.epoch + 1,
            )
        }
        None => {
            let model = ResFormer::<T>::new(cfg.model_config(data.vocab.len(), data.labels.len()))?;
            let trainer = Trainer::new(&model, cfg.train.clone())?;
            (model, trainer, 0)
        }
    };

    let reference_max_deviation = if opts.reference_check {
        Some(reference_check(&model, cfg, &data.train)?)
    } else {
        None
    };

    let mut log = MetricsLog::open(out.join(METRICS_FILE), opts.resume.is_some())?;
    if let Some(d) = reference_max_deviation {
        log.write(
            &json!({"kind": "reference_check", "max_deviation": d, "tolerance": REFERENCE_TOLERANCE}).to_string(),
        )?;
    }
    let mut meta = RunMetadata {
        labels: data.labels.clone(),
        vocab: data.vocab.tokens().to_vec(),
        epoch: start_epoch.saturating_sub(1),
        config: cfg.clone(),
    };
    let mut best: Option<(usize, f64)> = None;
    let mut final_val = None;
    for epoch in start_epoch..cfg.train.epochs {
        let mut steps = StepLog { lines: Vec::new() };
        let trace = trainer.train_epoch_batched(&mut model, &data.train, epoch, &mut steps)?;
        for line in &steps.lines {
            log.write(line)?;
        }
        meta.epoch = epoch;
        let last = epoch + 1 == cfg.train.epochs;
        let mut record = json!({"kind": "epoch", "epoch": epoch, "train_loss": trace.mean_loss});
        if !data.val.is_empty() && ((epoch + 1) % cfg.train.eval_every == 0 || last) {
            let report = evaluate(&model, &data.val, cfg.seed)?.report;
            record["val_accuracy"] = json!(report.accuracy);
            record["val_weighted_f1"] = json!(report.weighted_f1);
            record["val_loss"] = json!(report.loss);
            if best.is_none_or(|(_, acc)| report.accuracy > acc) {
                best = Some((epoch, report.accuracy));
                save(&out.join(BEST_CHECKPOINT), &model, &trainer, &meta)?;
            }
            final_val = Some(report);
        }
        log.write(&record.to_string())?;
        save(&out.join(FINAL_CHECKPOINT), &model, &trainer, &meta)?;
    }

    let test = match &data.test {
        Some(t) if !t.is_empty() => Some(evaluate(&model, t, cfg.seed)?.report),
        _ => None,
    };
    let summary = TrainSummary {
        epochs_run: cfg.train.epochs.saturating_sub(start_epoch),
        final_step: trainer.optimizer_state().step,
        best_epoch: best.map(|b| b.0),
        best_val_accuracy: best.map(|b| b.1),
        final_val,
        test,
        reference_max_deviation,
    };
    let mut line = json!({
        "kind": "final",
        "step": summary.final_step,
        "best_epoch": summary.best_epoch,
        "best_val_accuracy": summary.best_val_accuracy,
    });
    if let Some(v) = &summary.final_val {
        line["val_accuracy"] = json!(v.accuracy);
        line["val_weighted_f1"] = json!(v.weighted_f1);
    }
    if let Some(t) = &summary.test {
        line["test_accuracy"] = json!(t.accuracy);
        line["test_weighted_f1"] = json!(t.weighted_f1);
    }
    log.write(&line.to_string())?;
    Ok(summary)
}
