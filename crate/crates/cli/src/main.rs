use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resformer::data::synthetic::SyntheticTaskSpec;
use resformer::fusion::CombinationMethod;
use resformer_cli::alloc::TrackingAllocator;
use resformer_cli::commands::{bench, eval, gen_data, gradcheck, train};
use resformer_cli::error::{CliError, CliResult, EXIT_NUMERICAL, EXIT_OK, EXIT_TOLERANCE};
use resformer_cli::{Overrides, Profile, RunConfig, THREADS_ENV};
use serde::Serialize;

#[global_allocator]
static ALLOCATOR: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(
    name = "resformer",
    version,
    about = "Reservoir memory + transformer sentence classifier"
)]
struct Cli {
    /// Run configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic marker/query corpora and a manifest
    GenData(GenDataArgs),
    /// Train with the batch-parallel trainer
    Train(TrainArgs),
    /// Evaluate a checkpoint on a JSONL file
    Eval(EvalArgs),
    /// Finite-difference gradient check on a micro model
    Gradcheck(GradcheckArgs),
    /// Per-sentence latency and peak memory against history length
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    num_corpora: Option<usize>,
    #[arg(long)]
    sentences: Option<usize>,
    /// Minimum distractors between a marker and its first query
    #[arg(long)]
    gap: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    distractor_vocab: Option<usize>,
    /// train,val,test fractions
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    split: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Verify B=1 equivalence with the sequential reference before training
    #[arg(long)]
    reference_check: bool,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary file that must match the checkpoint's
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum CombineChoice {
    All,
    #[value(name = "cross_attention")]
    CrossAttention,
    Concat,
    Add,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    combine: CombineChoice,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10, 100, 1000, 5000])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Sentences timed per repetition
    #[arg(long, default_value_t = 20)]
    window: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 1000])]
    time_pair: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 5000])]
    memory_pair: Vec<usize>,
    #[arg(long, default_value_t = 1.2)]
    tolerance: f64,
}

fn print_json<V: Serialize>(v: &V) {
    let text = serde_json::to_string_pretty(v).expect("reports serialize");
    // a closed pipe downstream is not a failure of the command
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {s:?}"
            ))),
        },
    }
}

fn init_threads(n: Option<usize>) {
    if let Some(n) = n {
        // fails only if a pool already exists, in which case it stays
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_config(cli: &Cli, overrides: Overrides) -> CliResult<RunConfig> {
    Ok(match &cli.config {
        Some(path) => RunConfig::from_file(path, &overrides)?,
        None => RunConfig::from_overrides(&overrides)?,
    })
}

fn run(cli: Cli) -> CliResult<i32> {
    let threads = threads_from_env()?;
    let base = Overrides {
        profile: cli.profile,
        seed: cli.seed,
        out_dir: cli.out.clone(),
        ..Overrides::default()
    };
    match &cli.command {
        Command::GenData(a) => {
            let d = SyntheticTaskSpec::default();
            let spec = SyntheticTaskSpec {
                num_corpora: a.num_corpora.unwrap_or(d.num_corpora),
                sentences_per_corpus: a.sentences.unwrap_or(d.sentences_per_corpus),
                marker_gap: a.gap.unwrap_or(d.marker_gap),
                num_classes: a.classes.unwrap_or(d.num_classes),
                distractor_vocab: a.distractor_vocab.unwrap_or(d.distractor_vocab),
                seed: cli.seed.unwrap_or(d.seed),
            };
            let ratios: [f64; 3] = a
                .split
                .as_slice()
                .try_into()
                .map_err(|_| CliError::Usage(format!("--split takes three fractions, got {}", a.split.len())))?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            print_json(&gen_data::run(&spec, ratios, &out)?);
            Ok(EXIT_OK)
        }
        Command::Train(a) => {
            init_threads(threads);
            let cfg = load_config(
                &cli,
                Overrides {
                    batch_size: a.batch_size,
                    epochs: a.epochs,
                    ..base
                },
            )?;
            let opts = train::TrainOptions {
                resume: a.resume.clone(),
                reference_check: a.reference_check,
            };
            print_json(&train::run(&cfg, &opts)?);
            Ok(EXIT_OK)
        }
        Command::Eval(a) => {
            init_threads(threads);
            print_json(&eval::run(&a.checkpoint, &a.data, a.vocab.as_deref())?);
            Ok(EXIT_OK)
        }
        Command::Gradcheck(a) => {
            let methods = match a.combine {
                CombineChoice::All => vec![
                    CombinationMethod::CrossAttention,
                    CombinationMethod::Concatenation,
                    CombinationMethod::ElementwiseAddition,
                ],
                CombineChoice::CrossAttention => vec![CombinationMethod::CrossAttention],
                CombineChoice::Concat => vec![CombinationMethod::Concatenation],
                CombineChoice::Add => vec![CombinationMethod::ElementwiseAddition],
            };
            let report = gradcheck::run(&methods, cli.seed.unwrap_or(0), a.corrupt_gradient)?;
            print_json(&report);
            Ok(if report.passed { EXIT_OK } else { EXIT_NUMERICAL })
        }
        Command::Bench(a) => {
            init_threads(Some(1));
            let cfg = load_config(&cli, base)?;
            let pair = |flag: &str, v: &[usize]| match v {
                [a, b] => Ok((*a, *b)),
                _ => Err(CliError::Usage(format!(
                    "{flag} takes two history lengths, got {}",
                    v.len()
                ))),
            };
            let opts = bench::BenchOptions {
                lengths: a.lengths.clone(),
                repetitions: a.repetitions,
                warmup: a.warmup,
                window: a.window,
                time_pair: pair("--time-pair", &a.time_pair)?,
                memory_pair: pair("--memory-pair", &a.memory_pair)?,
                tolerance: a.tolerance,
            };
            let report = bench::run(&cfg, &opts)?;
            print_json(&report);
            Ok(if report.passed { EXIT_OK } else { EXIT_TOLERANCE })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
