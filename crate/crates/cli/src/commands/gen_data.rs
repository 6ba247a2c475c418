//! Synthetic marker/query corpora, split by corpus, plus a manifest.

use std::path::{Path, PathBuf};

use resformer::data::corpus::write_jsonl;
use resformer::data::split::split;
use resformer::data::synthetic::{generate_synthetic, SyntheticTaskSpec};
use serde::Serialize;

use crate::error::{io_error, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct PartSummary {
    pub path: PathBuf,
    pub corpora: usize,
    pub sentences: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub spec: SyntheticTaskSpec,
    pub seed: u64,
    pub split: [f64; 3],
    pub labels: Vec<String>,
    pub train: PartSummary,
    pub val: PartSummary,
    pub test: PartSummary,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn run(spec: &SyntheticTaskSpec, ratios: [f64; 3], out: &Path) -> CliResult<Manifest> {
    let data = generate_synthetic(spec)?;
    let (train, val, test) = split(&data.corpora, ratios, spec.seed)?;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut parts = Vec::with_capacity(3);
    for (name, corpora) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = out.join(format!("{name}.jsonl"));
        write_jsonl(&path, corpora)?;
        parts.push(PartSummary {
            path,
            corpora: corpora.len(),
            sentences: corpora.iter().map(|c| c.sentences.len()).sum(),
        });
    }
    let [train, val, test]: [PartSummary; 3] = parts.try_into().expect("three parts");
    let manifest = Manifest {
        spec: spec.clone(),
        seed: spec.seed,
        split: ratios,
        labels: data.labels,
        train,
        val,
        test,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
    Ok(manifest)
}
