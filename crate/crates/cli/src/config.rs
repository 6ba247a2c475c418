//! Run configuration: profile defaults, then the TOML file, then command-line
//! overrides. Parsing is total: every unknown key and every bad value is
//! collected before anything runs.

use std::path::{Path, PathBuf};

use resformer::fusion::CombinationMethod;
use resformer::model::ModelConfig;
use resformer::numerics::rng::mix_stream;
use resformer::numerics::Activation;
use resformer::reservoir::{
    ReservoirConfig, DEFAULT_HISTORY, DEFAULT_INPUT_SCALING, DESK_SIZES, TABLE_LEAKY_ALPHAS, TABLE_SIZES,
    TABLE_SPARSITIES, TABLE_SPECTRAL_RADII,
};
use resformer::stm::StmConfig;
use resformer::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[value(name = "paper_defaults")]
    PaperDefaults,
    #[value(name = "desk_scale")]
    DeskScale,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::PaperDefaults => "paper_defaults",
            Profile::DeskScale => "desk_scale",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "paper_defaults" => Some(Profile::PaperDefaults),
            "desk_scale" => Some(Profile::DeskScale),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// One row of the reservoir table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReservoirRow {
    pub size: usize,
    pub spectral_radius: f64,
    pub leaky_alpha: f64,
    pub sparsity: f64,
    pub input_scaling: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub min_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_hidden: usize,
    pub attention_dropout: f64,
    pub history: usize,
    pub combine: CombinationMethod,
    pub fusion_ffn_hidden: usize,
    pub use_memory: bool,
    pub readout_dim: usize,
    pub readout_activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub data: DataPaths,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub reservoirs: Vec<ReservoirRow>,
}

/// Values given on the command line; they win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
#[error("invalid configuration:\n  {}", .problems.join("\n  "))]
pub struct ConfigErrors {
    pub problems: Vec<String>,
}

fn table_rows(sizes: &[usize]) -> Vec<ReservoirRow> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| ReservoirRow {
            size,
            spectral_radius: TABLE_SPECTRAL_RADII[i % TABLE_SPECTRAL_RADII.len()],
            leaky_alpha: TABLE_LEAKY_ALPHAS[i % TABLE_LEAKY_ALPHAS.len()],
            sparsity: TABLE_SPARSITIES[i % TABLE_SPARSITIES.len()],
            input_scaling: DEFAULT_INPUT_SCALING,
        })
        .collect()
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let (model, reservoirs) = match profile {
            Profile::PaperDefaults => (
                ModelSection {
                    model_dim: 768,
                    layers: 2,
                    heads: 12,
                    max_len: 64,
                    ffn_hidden: 768,
                    attention_dropout: 0.1,
                    history: DEFAULT_HISTORY,
                    combine: CombinationMethod::CrossAttention,
                    fusion_ffn_hidden: 768,
                    use_memory: true,
                    readout_dim: 64,
                    readout_activation: Activation::Relu,
                },
                table_rows(&TABLE_SIZES),
            ),
            Profile::DeskScale => (
                ModelSection {
                    model_dim: 128,
                    layers: 2,
                    heads: 4,
                    max_len: 64,
                    ffn_hidden: 512,
                    attention_dropout: 0.1,
                    history: DEFAULT_HISTORY,
                    combine: CombinationMethod::CrossAttention,
                    fusion_ffn_hidden: 512,
                    use_memory: true,
                    readout_dim: 32,
                    readout_activation: Activation::Relu,
                },
                table_rows(&DESK_SIZES),
            ),
        };
        Self {
            profile,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            precision: Precision::F64,
            data: DataPaths {
                train: None,
                val: None,
                test: None,
                min_count: 1,
            },
            model,
            train: TrainConfig::default(),
            reservoirs,
        }
    }

    /// Resolves `text` (TOML) against the profile defaults. Relative paths are
    /// taken relative to `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<Self, ConfigErrors> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigErrors {
            problems: vec![format!("not valid TOML: {}", e.message())],
        })?;
        resolve(table, base_dir, overrides)
    }

    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigErrors {
            problems: vec![format!("cannot read {}: {e}", path.display())],
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    /// Profile defaults plus overrides, without a file.
    pub fn from_overrides(overrides: &Overrides) -> Result<Self, ConfigErrors> {
        resolve(Table::new(), Path::new("."), overrides)
    }

    pub fn reservoir_configs(&self) -> Vec<ReservoirConfig> {
        self.reservoirs
            .iter()
            .enumerate()
            .map(|(i, r)| ReservoirConfig {
                size: r.size,
                input_dim: self.model.model_dim,
                leaky_alpha: r.leaky_alpha,
                spectral_radius: r.spectral_radius,
                sparsity: r.sparsity,
                input_scaling: r.input_scaling,
                readout_dim: self.model.readout_dim,
                readout_activation: self.model.readout_activation,
                seed: mix_stream(self.seed, i as u64),
                weight_stddev: 1.0,
            })
            .collect()
    }

    pub fn model_config(&self, vocab_size: usize, num_classes: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            stm: StmConfig {
                vocab_size,
                model_dim: m.model_dim,
                layers: m.layers,
                heads: m.heads,
                max_len: m.max_len,
                ffn_hidden: m.ffn_hidden,
                attention_dropout: m.attention_dropout,
                num_classes,
            },
            reservoirs: self.reservoir_configs(),
            history: m.history,
            combine: m.combine,
            fusion_ffn_hidden: m.fusion_ffn_hidden,
            use_memory: m.use_memory,
            seed: self.seed,
        }
    }

    /// Problems of the resolved values, independent of any data.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .train
            .problems()
            .into_iter()
            .map(|p| format!("train: {p}"))
            .collect();
        let placeholder = self.model_config(4, 2);
        out.extend(placeholder.problems().into_iter().map(|p| format!("model: {p}")));
        out
    }
}

const TOP_KEYS: [&str; 9] = [
    "profile",
    "seed",
    "out_dir",
    "precision",
    "data",
    "model",
    "train",
    "reservoirs",
    "reservoir",
];

/// Typed access to one TOML table; consumed keys are removed so the rest can
/// be reported as unknown.
struct Section<'p> {
    prefix: String,
    table: Table,
    problems: &'p mut Vec<String>,
}

impl<'p> Section<'p> {
    fn new(prefix: impl Into<String>, table: Table, problems: &'p mut Vec<String>) -> Self {
        Self {
            prefix: prefix.into(),
            table,
            problems,
        }
    }

    fn take<T>(&mut self, key: &str, expected: &str, conv: impl FnOnce(&Value) -> Option<T>) -> Option<T> {
        let value = self.table.remove(key)?;
        let out = conv(&value);
        if out.is_none() {
            self.problems.push(format!(
                "{}{key}: expected {expected}, found {} {value}",
                self.prefix,
                value.type_str()
            ));
        }
        out
    }

    fn usize(&mut self, key: &str, slot: &mut usize) {
        if let Some(v) = self.take(key, "a non-negative integer", |v| {
            v.as_integer().and_then(|i| usize::try_from(i).ok())
        }) {
            *slot = v;
        }
    }

    fn u64(&mut self, key: &str, slot: &mut u64) {
        if let Some(v) = self.take(key, "a non-negative integer", |v| {
            v.as_integer().and_then(|i| u64::try_from(i).ok())
        }) {
            *slot = v;
        }
    }

    fn f64(&mut self, key: &str, slot: &mut f64) {
        if let Some(v) = self.take(key, "a number", |v| {
            v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
        }) {
            *slot = v;
        }
    }

    fn bool(&mut self, key: &str, slot: &mut bool) {
        if let Some(v) = self.take(key, "a boolean", Value::as_bool) {
            *slot = v;
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.take(key, "a string", |v| v.as_str().map(str::to_string))
    }

    fn path(&mut self, key: &str, base: &Path, slot: &mut Option<PathBuf>) {
        if let Some(s) = self.string(key) {
            let p = PathBuf::from(s);
            *slot = Some(if p.is_absolute() { p } else { base.join(p) });
        }
    }

    fn parsed<T>(&mut self, key: &str, expected: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>) {
        if let Some(s) = self.string(key) {
            match parse(&s) {
                Some(v) => *slot = v,
                None => self
                    .problems
                    .push(format!("{}{key}: expected {expected}, found {s:?}", self.prefix)),
            }
        }
    }

    fn subtable(&mut self, key: &str) -> Option<Table> {
        self.take(key, "a table", |v| v.as_table().cloned())
    }

    fn finish(self) {
        for key in self.table.keys() {
            self.problems.push(format!("{}{key}: unknown key", self.prefix));
        }
    }
}

fn activation(s: &str) -> Option<Activation> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
}

fn resolve(mut table: Table, base: &Path, overrides: &Overrides) -> Result<RunConfig, ConfigErrors> {
    let mut problems = Vec::new();

    let mut profile = Profile::DeskScale;
    if let Some(v) = table.remove("profile") {
        match v.as_str().and_then(Profile::parse) {
            Some(p) => profile = p,
            None => problems.push(format!(
                "profile: expected \"paper_defaults\" or \"desk_scale\", found {v}"
            )),
        }
    }
    if let Some(p) = overrides.profile {
        profile = p;
    }
    let mut cfg = RunConfig::defaults(profile);

    let mut top = Section::new("", Table::new(), &mut problems);
    for key in TOP_KEYS.iter().filter(|k| **k != "profile") {
        if let Some(v) = table.remove(*key) {
            top.table.insert(key.to_string(), v);
        }
    }
    let unknown_top: Vec<String> = table.keys().cloned().collect();
    top.u64("seed", &mut cfg.seed);
    let mut out_dir = None;
    top.path("out_dir", base, &mut out_dir);
    if let Some(p) = out_dir {
        cfg.out_dir = p;
    }
    top.parsed("precision", "\"f32\" or \"f64\"", &mut cfg.precision, |s| match s {
        "f32" => Some(Precision::F32),
        "f64" => Some(Precision::F64),
        _ => None,
    });
    let data = top.subtable("data");
    let model = top.subtable("model");
    let train = top.subtable("train");
    let rows = top.take("reservoirs", "an array of tables ([[reservoirs]])", |v| {
        v.as_array()
            .and_then(|a| a.iter().map(|r| r.as_table().cloned()).collect::<Option<Vec<_>>>())
    });
    if top.table.remove("reservoir").is_some() {
        top.problems
            .push("reservoir: unknown key (the table is spelled [[reservoirs]])".to_string());
    }
    top.finish();
    for key in unknown_top {
        problems.push(format!("{key}: unknown key"));
    }

    if let Some(t) = data {
        let mut s = Section::new("data.", t, &mut problems);
        s.path("train", base, &mut cfg.data.train);
        s.path("val", base, &mut cfg.data.val);
        s.path("test", base, &mut cfg.data.test);
        s.usize("min_count", &mut cfg.data.min_count);
        s.finish();
    }

    let mut row_scaling = None;
    if let Some(t) = model {
        let m = &mut cfg.model;
        let mut s = Section::new("model.", t, &mut problems);
        s.usize("model_dim", &mut m.model_dim);
        s.usize("layers", &mut m.layers);
        s.usize("heads", &mut m.heads);
        s.usize("max_len", &mut m.max_len);
        s.usize("ffn_hidden", &mut m.ffn_hidden);
        s.f64("attention_dropout", &mut m.attention_dropout);
        s.usize("history", &mut m.history);
        s.parsed(
            "combine",
            "\"cross_attention\", \"concat\" or \"add\"",
            &mut m.combine,
            |s| s.parse().ok(),
        );
        s.usize("fusion_ffn_hidden", &mut m.fusion_ffn_hidden);
        s.bool("use_memory", &mut m.use_memory);
        s.usize("readout_dim", &mut m.readout_dim);
        s.parsed(
            "readout_activation",
            "\"relu\", \"tanh\", \"leaky_relu\" or \"linear\"",
            &mut m.readout_activation,
            activation,
        );
        let mut scaling = f64::NAN;
        s.f64("input_scaling", &mut scaling);
        if !scaling.is_nan() {
            row_scaling = Some(scaling);
        }
        s.finish();
    }

    if let Some(t) = train {
        let tc = &mut cfg.train;
        let mut s = Section::new("train.", t, &mut problems);
        s.f64("learning_rate", &mut tc.learning_rate);
        s.f64("weight_decay", &mut tc.weight_decay);
        s.usize("batch_size", &mut tc.batch_size);
        s.usize("epochs", &mut tc.epochs);
        let mut clip = tc.clip_norm.unwrap_or(0.0);
        s.f64("clip_norm", &mut clip);
        tc.clip_norm = (clip != 0.0).then_some(clip);
        s.usize("eval_every", &mut tc.eval_every);
        s.bool("shuffle_corpora", &mut tc.shuffle_corpora);
        s.bool("dropout", &mut tc.dropout);
        s.finish();
    }

    if let Some(rows) = rows {
        let default_scaling = row_scaling.unwrap_or(DEFAULT_INPUT_SCALING);
        cfg.reservoirs = rows
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut row = ReservoirRow {
                    size: 0,
                    spectral_radius: f64::NAN,
                    leaky_alpha: f64::NAN,
                    sparsity: f64::NAN,
                    input_scaling: default_scaling,
                };
                let required = ["size", "spectral_radius", "leaky_alpha", "sparsity"];
                for key in required {
                    if !t.contains_key(key) {
                        problems.push(format!("reservoirs[{i}].{key}: missing"));
                    }
                }
                let mut s = Section::new(format!("reservoirs[{i}]."), t, &mut problems);
                s.usize("size", &mut row.size);
                s.f64("spectral_radius", &mut row.spectral_radius);
                s.f64("leaky_alpha", &mut row.leaky_alpha);
                s.f64("sparsity", &mut row.sparsity);
                s.f64("input_scaling", &mut row.input_scaling);
                s.finish();
                row
            })
            .collect();
    } else if let Some(scaling) = row_scaling {
        cfg.reservoirs.iter_mut().for_each(|r| r.input_scaling = scaling);
    }

    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    if let Some(dir) = &overrides.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(b) = overrides.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(e) = overrides.epochs {
        cfg.train.epochs = e;
    }

    if problems.is_empty() {
        problems.extend(cfg.problems());
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors { problems })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigErrors> {
        RunConfig::from_toml(text, Path::new("/base"), &Overrides::default())
    }

    #[test]
    fn empty_file_is_desk_profile() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, {
            let mut d = RunConfig::defaults(Profile::DeskScale);
            d.out_dir = PathBuf::from("runs");
            d
        });
        assert_eq!(cfg.reservoirs.len(), 5);
        assert_eq!(cfg.reservoirs[4].size, 100);
    }

    #[test]
    fn full_profile_mirrors_the_table() {
        let cfg = parse("profile = \"paper_defaults\"").unwrap();
        let sizes: Vec<usize> = cfg.reservoirs.iter().map(|r| r.size).collect();
        assert_eq!(sizes, vec![1500, 1600, 1700, 1800, 1900]);
        assert_eq!(cfg.reservoirs[0].spectral_radius, 0.9);
        assert_eq!(cfg.reservoirs[4].leaky_alpha, 0.52);
        assert_eq!(cfg.reservoirs[2].sparsity, 0.5);
        assert_eq!(cfg.train.learning_rate, 2e-4);
        assert_eq!(cfg.train.weight_decay, 0.01);
    }

    #[test]
    fn every_problem_is_reported_at_once() {
        let err = parse(
            r#"
            colour = "blue"
            [model]
            model_dim = "big"
            heads = 3
            widht = 4
            [train]
            learning_rate = true
            [[reservoirs]]
            size = 10
            spectral_radius = 0.9
            "#,
        )
        .unwrap_err();
        let all = err.problems.join("\n");
        for needle in [
            "colour: unknown key",
            "model.model_dim: expected",
            "model.widht: unknown key",
            "train.learning_rate: expected",
            "reservoirs[0].leaky_alpha: missing",
            "reservoirs[0].sparsity: missing",
        ] {
            assert!(all.contains(needle), "{needle} not in\n{all}");
        }
    }

    #[test]
    fn semantic_problems_after_parsing() {
        let err = parse("[model]\nheads = 3\n[train]\nbatch_size = 0").unwrap_err();
        let all = err.problems.join("\n");
        assert!(all.contains("heads"), "{all}");
        assert!(all.contains("batch_size"), "{all}");
    }

    #[test]
    fn table_rows_and_relative_paths() {
        let cfg = parse(
            r#"
            seed = 9
            [data]
            train = "d/train.jsonl"
            [model]
            model_dim = 16
            heads = 2
            combine = "add"
            input_scaling = 0.3
            [[reservoirs]]
            size = 20
            spectral_radius = 0.8
            leaky_alpha = 0.5
            sparsity = 0.5
            [[reservoirs]]
            size = 30
            spectral_radius = 0.7
            leaky_alpha = 0.4
            sparsity = 0.2
            input_scaling = 0.05
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.train, Some(PathBuf::from("/base/d/train.jsonl")));
        assert_eq!(cfg.model.combine, CombinationMethod::ElementwiseAddition);
        assert_eq!(cfg.reservoirs.len(), 2);
        assert_eq!(cfg.reservoirs[0].input_scaling, 0.3);
        assert_eq!(cfg.reservoirs[1].input_scaling, 0.05);
        let rc = cfg.reservoir_configs();
        assert_eq!(rc[1].input_dim, 16);
        assert_ne!(rc[0].seed, rc[1].seed);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn overrides_win() {
        let o = Overrides {
            profile: Some(Profile::PaperDefaults),
            seed: Some(3),
            out_dir: Some(PathBuf::from("/tmp/x")),
            batch_size: Some(1),
            epochs: Some(2),
        };
        let cfg = RunConfig::from_toml("profile = \"desk_scale\"\nseed = 1", Path::new("."), &o).unwrap();
        assert_eq!(cfg.profile, Profile::PaperDefaults);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.batch_size, 1);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn clip_zero_disables() {
        let cfg = parse("[train]\nclip_norm = 0").unwrap();
        assert_eq!(cfg.train.clip_norm, None);
    }
}
