//! Streaming evaluation of a checkpoint on a JSONL file.

use std::path::Path;

use resformer::data::corpus::load_jsonl;
use resformer::data::encode;
use resformer::data::vocab::Vocab;
use resformer::model::checkpoint::CheckpointError;
use resformer::model::ResFormer;
use resformer::training::{evaluate, EvalReport};
use resformer::Scalar;

use super::train::RunMetadata;
use crate::error::{CliError, CliResult};

fn eval_typed<T: Scalar>(
    model: ResFormer<T>,
    extra: serde_json::Value,
    checkpoint: &Path,
    data: &Path,
    vocab_file: Option<&Path>,
) -> CliResult<EvalReport> {
    let meta: RunMetadata = serde_json::from_value(extra)
        .map_err(|e| CliError::Data(format!("{}: checkpoint metadata: {e}", checkpoint.display())))?;
    let vocab = Vocab::from_text(&(meta.vocab.join("\n") + "\n"))?;
    if vocab.len() != model.config().stm.vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary mismatch: checkpoint metadata lists {} tokens but the embedding has {} rows",
            vocab.len(),
            model.config().stm.vocab_size
        )));
    }
    if let Some(path) = vocab_file {
        let given = Vocab::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if given != vocab {
            return Err(CliError::Data(format!(
                "vocabulary mismatch: {} ({} tokens) differs from the checkpoint's vocabulary ({} tokens)",
                path.display(),
                given.len(),
                vocab.len()
            )));
        }
    }
    let corpora = load_jsonl(data)?;
    if corpora.iter().all(|c| c.sentences.is_empty()) {
        return Err(CliError::Data(format!("{}: no sentences to evaluate", data.display())));
    }
    let encoded = encode(&corpora, &vocab, &meta.labels)?;
    Ok(evaluate(&model, &encoded, meta.config.seed)?.report)
}

pub fn run(checkpoint: &Path, data: &Path, vocab: Option<&Path>) -> CliResult<EvalReport> {
    match ResFormer::<f64>::load(checkpoint) {
        Ok(l) => eval_typed(l.model, l.extra, checkpoint, data, vocab),
        Err(resformer::Error::Checkpoint(CheckpointError::DType { .. })) => {
            let l = ResFormer::<f32>::load(checkpoint)?;
            eval_typed(l.model, l.extra, checkpoint, data, vocab)
        }
        Err(e) => Err(e.into()),
    }
}
