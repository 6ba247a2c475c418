//! Line-delimited JSON corpora.
//!
//! Each line is `{"corpus_id": str, "index": int, "text": str, "label": str}`.
//! Records of one corpus may be interleaved with other corpora; indices must
//! be contiguous from 0 after grouping.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub corpus_id: String,
    pub index: usize,
    pub text: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub id: String,
    pub sentences: Vec<SentenceRecord>,
}

const KEYS: [&str; 4] = ["corpus_id", "index", "text", "label"];

fn parse_line(line_no: usize, line: &str) -> Result<SentenceRecord> {
    let malformed = |reason: String| Error::MalformedLine { line: line_no, reason };
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("record is not an object".into()))?;
    let unknown: Vec<String> = obj.keys().filter(|k| !KEYS.contains(&k.as_str())).cloned().collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownKeys {
            line: line_no,
            keys: unknown,
        });
    }
    let text_field = |k: &str| {
        obj.get(k)
            .ok_or_else(|| malformed(format!("missing key {k:?}")))?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| malformed(format!("{k:?} must be a string")))
    };
    let index = obj
        .get("index")
        .ok_or_else(|| malformed("missing key \"index\"".into()))?
        .as_u64()
        .ok_or_else(|| malformed("\"index\" must be a non-negative integer".into()))?;
    Ok(SentenceRecord {
        corpus_id: text_field("corpus_id")?,
        index: index as usize,
        text: text_field("text")?,
        label: text_field("label")?,
    })
}

/// Groups records by corpus (first-appearance order) and sorts by index.
pub fn parse_jsonl(text: &str) -> Result<Vec<Corpus>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<SentenceRecord>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(i + 1, line)?;
        let entry = groups.entry(record.corpus_id.clone()).or_insert_with(|| {
            order.push(record.corpus_id.clone());
            Vec::new()
        });
        entry.push(record);
    }
    let mut corpora = Vec::with_capacity(order.len());
    for id in order {
        let mut sentences = groups.remove(&id).unwrap_or_default();
        sentences.sort_by_key(|s| s.index);
        for pair in sentences.windows(2) {
            if pair[0].index == pair[1].index {
                return Err(Error::DuplicateIndex {
                    corpus_id: id,
                    index: pair[0].index,
                });
            }
        }
        if let Some(missing) = sentences
            .iter()
            .enumerate()
            .find(|(i, s)| s.index != *i)
            .map(|(i, _)| i)
        {
            return Err(Error::NonContiguous { corpus_id: id, missing });
        }
        corpora.push(Corpus { id, sentences });
    }
    Ok(corpora)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Corpus>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn to_jsonl(corpora: &[Corpus]) -> String {
    let mut out = String::new();
    for c in corpora {
        for s in &c.sentences {
            out.push_str(&serde_json::to_string(s).expect("records always serialize"));
            out.push('\n');
        }
    }
    out
}

pub fn write_jsonl(path: &Path, corpora: &[Corpus]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(to_jsonl(corpora).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Rejects label names outside `labels`.
pub fn check_labels(corpora: &[Corpus], labels: &[String]) -> Result<()> {
    for s in corpora.iter().flat_map(|c| &c.sentences) {
        if !labels.contains(&s.label) {
            return Err(Error::UnknownLabel(s.label.clone()));
        }
    }
    Ok(())
}

/// A batch must come from a single corpus.
pub fn check_batch(records: &[SentenceRecord]) -> Result<()> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.corpus_id != first.corpus_id) {
            return Err(Error::Batching {
                first: first.corpus_id.clone(),
                second: other.corpus_id.clone(),
            });
        }
    }
    Ok(())
}

/// Consecutive batches of at most `size` sentences, split at corpus
/// boundaries.
pub fn batches(corpora: &[Corpus], size: usize) -> Vec<&[SentenceRecord]> {
    corpora.iter().flat_map(|c| c.sentences.chunks(size.max(1))).collect()
}
