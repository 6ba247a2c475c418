//! Per-sentence latency and peak memory as a function of history depth.
//!
//! One long synthetic corpus is streamed through the model. At each measured
//! depth the memory is cloned and a fixed probe window of sentences is run
//! (forward plus advance) on the clone, so every depth times identical work
//! and only the history differs.

use std::time::Instant;

use resformer::data::synthetic::{generate_synthetic, SyntheticTaskSpec};
use resformer::data::vocab::Vocab;
use resformer::data::{encode, EncodedSentence};
use resformer::model::ResFormer;
use resformer::reservoir::{GroupMemory, InitMode};
use resformer::training::corpus_memory_rng;
use resformer::Scalar;
use serde::Serialize;

use crate::alloc;
use crate::config::{Precision, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub window: usize,
    /// depths whose latency ratio is checked (early, late)
    pub time_pair: (usize, usize),
    /// depths whose peak-memory ratio is checked (early, late)
    pub memory_pair: (usize, usize),
    pub tolerance: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lengths: vec![10, 100, 1000, 5000],
            repetitions: 5,
            warmup: 3,
            window: 20,
            time_pair: (10, 1000),
            memory_pair: (100, 5000),
            tolerance: 1.2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchPoint {
    /// sentences already absorbed by the reservoirs
    pub history: usize,
    /// median over repetitions of the mean per-sentence forward+advance time
    pub seconds_per_sentence: f64,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    /// least-squares slope of seconds per sentence against history length
    pub slope: f64,
    pub time_ratio: f64,
    pub memory_ratio: f64,
    pub tolerance: f64,
    pub memory_source: &'static str,
    pub repetitions: usize,
    pub warmup: usize,
    pub window: usize,
    pub passed: bool,
}

impl BenchOptions {
    fn validate(&self) -> CliResult<()> {
        let mut problems = Vec::new();
        if self.lengths.len() < 3 {
            problems.push(format!("need at least 3 history lengths, got {}", self.lengths.len()));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            problems.push(format!(
                "history lengths {:?} must be strictly increasing",
                self.lengths
            ));
        }
        for (what, (a, b)) in [("time", self.time_pair), ("memory", self.memory_pair)] {
            if !self.lengths.contains(&a) || !self.lengths.contains(&b) {
                problems.push(format!("{what} pair ({a}, {b}) must be among the measured lengths"));
            }
        }
        if self.repetitions == 0 || self.window == 0 {
            problems.push("repetitions and window must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("bench: {}", problems.join("; "))))
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn slope(points: &[BenchPoint]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.history as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.seconds_per_sentence).sum::<f64>() / n;
    let sxy: f64 = points
        .iter()
        .map(|p| (p.history as f64 - mx) * (p.seconds_per_sentence - my))
        .sum();
    let sxx: f64 = points.iter().map(|p| (p.history as f64 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

fn run_window<T: Scalar>(
    model: &ResFormer<T>,
    memory: &mut GroupMemory<T>,
    probe: &[EncodedSentence],
) -> CliResult<()> {
    for s in probe {
        let out = model.forward(&s.ids, memory, None)?;
        model.advance_memory(memory, &out.hidden)?;
    }
    Ok(())
}

fn measure<T: Scalar>(
    model: &ResFormer<T>,
    memory: &GroupMemory<T>,
    probe: &[EncodedSentence],
    opts: &BenchOptions,
) -> CliResult<(f64, usize)> {
    let mut times = Vec::with_capacity(opts.repetitions);
    let mut peak = 0;
    for rep in 0..opts.warmup + opts.repetitions {
        let mut m = memory.clone();
        alloc::reset_peak();
        let t0 = Instant::now();
        run_window(model, &mut m, probe)?;
        let dt = t0.elapsed().as_secs_f64() / probe.len() as f64;
        if rep >= opts.warmup {
            times.push(dt);
            peak = peak.max(alloc::peak_bytes());
        }
    }
    if !alloc::is_active() {
        peak = alloc::rss_peak_bytes().unwrap_or(0);
    }
    Ok((median(times), peak))
}

fn bench_typed<T: Scalar>(cfg: &RunConfig, opts: &BenchOptions) -> CliResult<BenchReport> {
    let longest = *opts.lengths.last().expect("validated");
    let spec = SyntheticTaskSpec {
        num_corpora: 1,
        sentences_per_corpus: longest + opts.window,
        seed: cfg.seed,
        ..SyntheticTaskSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    let vocab = Vocab::build(&data.corpora, 1);
    let corpus = encode(&data.corpora, &vocab, &data.labels)?.remove(0);
    let model = ResFormer::<T>::new(cfg.model_config(vocab.len(), data.labels.len()))?;
    let probe = &corpus.sentences[..opts.window];

    let mut memory = model.new_memory(InitMode::SeededRandom, &corpus_memory_rng(cfg.seed, &corpus.id));
    let mut points = Vec::with_capacity(opts.lengths.len());
    let mut absorbed = 0;
    for &depth in &opts.lengths {
        // untimed streaming up to the next depth
        run_window(&model, &mut memory, &corpus.sentences[absorbed..depth])?;
        absorbed = depth;
        let (seconds_per_sentence, peak_bytes) = measure(&model, &memory, probe, opts)?;
        points.push(BenchPoint {
            history: depth,
            seconds_per_sentence,
            peak_bytes,
        });
    }
    let at = |d: usize| points.iter().find(|p| p.history == d).expect("validated");
    let time_ratio = at(opts.time_pair.1).seconds_per_sentence / at(opts.time_pair.0).seconds_per_sentence;
    let memory_ratio = at(opts.memory_pair.1).peak_bytes as f64 / at(opts.memory_pair.0).peak_bytes.max(1) as f64;
    Ok(BenchReport {
        slope: slope(&points),
        passed: time_ratio < opts.tolerance && memory_ratio < opts.tolerance,
        points,
        time_ratio,
        memory_ratio,
        tolerance: opts.tolerance,
        memory_source: if alloc::is_active() {
            "allocator_high_water"
        } else {
            "rss_high_water"
        },
        repetitions: opts.repetitions,
        warmup: opts.warmup,
        window: opts.window,
    })
}

pub fn run(cfg: &RunConfig, opts: &BenchOptions) -> CliResult<BenchReport> {
    opts.validate()?;
    match cfg.precision {
        Precision::F64 => bench_typed::<f64>(cfg, opts),
        Precision::F32 => bench_typed::<f32>(cfg, opts),
    }
}
