//! Corpus ingestion, tokenization, splitting and synthetic data.

pub mod corpus;
pub mod split;
pub mod synthetic;
pub mod vocab;

use crate::error::{Error, Result};

pub use corpus::{
    batches, check_batch, check_labels, load_jsonl, parse_jsonl, to_jsonl, write_jsonl, Corpus, SentenceRecord,
};
pub use split::split;
pub use synthetic::{generate_synthetic, SentenceKind, SyntheticData, SyntheticTaskSpec};
pub use vocab::{tokenize, Vocab};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// Token ids and class indices of one corpus, in sentence order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub id: String,
    pub sentences: Vec<EncodedSentence>,
}

pub fn encode(corpora: &[Corpus], vocab: &Vocab, labels: &[String]) -> Result<Vec<EncodedCorpus>> {
    corpora
        .iter()
        .map(|c| {
            let sentences = c
                .sentences
                .iter()
                .map(|s| {
                    let label = labels
                        .iter()
                        .position(|l| *l == s.label)
                        .ok_or_else(|| Error::UnknownLabel(s.label.clone()))?;
                    Ok(EncodedSentence {
                        ids: vocab.encode(&s.text),
                        label,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(EncodedCorpus {
                id: c.id.clone(),
                sentences,
            })
        })
        .collect()
}

/// Sorted, de-duplicated label names of `corpora`.
pub fn label_set(corpora: &[Corpus]) -> Vec<String> {
    let mut labels: Vec<String> = corpora
        .iter()
        .flat_map(|c| c.sentences.iter().map(|s| s.label.clone()))
        .collect();
    labels.sort();
    labels.dedup();
    labels
}
