//! Marker/query long-range benchmark.
//!
//! A marker sentence `"signal is <class>"` sets the current class. Query
//! sentences `"what is the signal"` carry the class of the most recent
//! marker and are separated from it by at least `marker_gap` distractor
//! sentences (label `"none"`). Distractors are pseudo-words that never
//! contain class words, so a query can only be answered from memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::{Corpus, SentenceRecord};

pub const CLASS_WORDS: [&str; 12] = [
    "red", "blue", "green", "yellow", "purple", "orange", "black", "white", "silver", "gold", "brown", "pink",
];
pub const NONE_LABEL: &str = "none";
pub const QUERY_TEXT: &str = "what is the signal";
const RESERVED_WORDS: [&str; 4] = ["what", "is", "the", "signal"];
const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ne", "ru", "ta", "so", "vi", "de", "po", "fa", "gu", "zi", "be", "ho", "wa", "ky", "me", "tor",
    "lan",
];
const STREAM_WORDS: u64 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_corpora: usize,
    pub sentences_per_corpus: usize,
    /// minimum number of distractors between a marker and its first query
    pub marker_gap: usize,
    pub num_classes: usize,
    pub distractor_vocab: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_corpora: 40,
            sentences_per_corpus: 120,
            marker_gap: 30,
            num_classes: 4,
            distractor_vocab: 200,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    /// A marker, `marker_gap` distractors and one query must fit in a corpus.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.marker_gap == 0 {
            problems.push("marker_gap must be at least 1".to_string());
        }
        if self.marker_gap + 2 > self.sentences_per_corpus {
            problems.push(format!(
                "marker_gap {} leaves no room for a marker and a query in {} sentences",
                self.marker_gap, self.sentences_per_corpus
            ));
        }
        if !(2..=CLASS_WORDS.len()).contains(&self.num_classes) {
            problems.push(format!("num_classes must be in 2..={}", CLASS_WORDS.len()));
        }
        if self.distractor_vocab < 4 {
            problems.push("distractor_vocab must be at least 4".to_string());
        }
        if self.num_corpora == 0 {
            problems.push("num_corpora must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(problems.join("; ")))
        }
    }

    /// Label names in class-index order: `"none"` first, then class words.
    pub fn labels(&self) -> Vec<String> {
        std::iter::once(NONE_LABEL)
            .chain(CLASS_WORDS[..self.num_classes].iter().copied())
            .map(str::to_string)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceKind {
    Marker { class: usize },
    Query { class: usize, marker_index: usize },
    Distractor,
}

/// Generator plan step for hand-built corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanItem {
    Marker(usize),
    Query,
    Distractor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub corpora: Vec<Corpus>,
    /// ground truth per corpus, aligned with sentences
    pub trace: Vec<Vec<SentenceKind>>,
    pub labels: Vec<String>,
}

fn pseudo_words(rng: &mut Rng, count: usize) -> Vec<String> {
    let mut words = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    while words.len() < count {
        let n = 2 + rng.below(2) as usize;
        let w: String = (0..n)
            .map(|_| SYLLABLES[rng.below(SYLLABLES.len() as u64) as usize])
            .collect();
        if CLASS_WORDS.contains(&w.as_str()) || RESERVED_WORDS.contains(&w.as_str()) || !seen.insert(w.clone()) {
            continue;
        }
        words.push(w);
    }
    words
}

fn distractor(rng: &mut Rng, words: &[String]) -> String {
    let n = 3 + rng.below(5) as usize;
    (0..n)
        .map(|_| words[rng.below(words.len() as u64) as usize].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

fn episode_plan(rng: &mut Rng, spec: &SyntheticTaskSpec, len: usize) -> Vec<PlanItem> {
    let mut plan = Vec::with_capacity(len);
    while plan.len() < len {
        plan.push(PlanItem::Marker(rng.below(spec.num_classes as u64) as usize));
        for _ in 0..spec.marker_gap + rng.below(3) as usize {
            plan.push(PlanItem::Distractor);
        }
        let queries = 2 + rng.below(3);
        for q in 0..queries {
            if q > 0 {
                for _ in 0..rng.below(3) {
                    plan.push(PlanItem::Distractor);
                }
            }
            plan.push(PlanItem::Query);
        }
    }
    plan.truncate(len);
    plan
}

/// Resolves query classes and produces the corpus for a plan.
pub fn corpus_from_plan(
    id: &str,
    plan: &[PlanItem],
    rng: &mut Rng,
    words: &[String],
    labels: &[String],
) -> Result<(Corpus, Vec<SentenceKind>)> {
    let mut current: Option<(usize, usize)> = None;
    let mut sentences = Vec::with_capacity(plan.len());
    let mut kinds = Vec::with_capacity(plan.len());
    for (i, item) in plan.iter().enumerate() {
        let (text, kind) = match *item {
            PlanItem::Marker(class) => {
                if class + 1 >= labels.len() {
                    return Err(Error::Spec(format!("marker class {class} has no label")));
                }
                current = Some((class, i));
                (
                    format!("signal is {}", labels[class + 1]),
                    SentenceKind::Marker { class },
                )
            }
            PlanItem::Query => {
                let (class, marker_index) =
                    current.ok_or_else(|| Error::Spec(format!("query at {i} precedes every marker")))?;
                (QUERY_TEXT.to_string(), SentenceKind::Query { class, marker_index })
            }
            PlanItem::Distractor => (distractor(rng, words), SentenceKind::Distractor),
        };
        let label = match kind {
            SentenceKind::Marker { class } | SentenceKind::Query { class, .. } => labels[class + 1].clone(),
            SentenceKind::Distractor => NONE_LABEL.to_string(),
        };
        sentences.push(SentenceRecord {
            corpus_id: id.to_string(),
            index: i,
            text,
            label,
        });
        kinds.push(kind);
    }
    Ok((
        Corpus {
            id: id.to_string(),
            sentences,
        },
        kinds,
    ))
}

pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let words = pseudo_words(&mut Rng::new(spec.seed, STREAM_WORDS), spec.distractor_vocab);
    let labels = spec.labels();
    let mut corpora = Vec::with_capacity(spec.num_corpora);
    let mut trace = Vec::with_capacity(spec.num_corpora);
    for c in 0..spec.num_corpora {
        let mut rng = Rng::new(spec.seed, 1 + c as u64);
        let plan = episode_plan(&mut rng, spec, spec.sentences_per_corpus);
        let id = format!("synthetic-{}-{c:04}", spec.seed);
        let (corpus, kinds) = corpus_from_plan(&id, &plan, &mut rng, &words, &labels)?;
        corpora.push(corpus);
        trace.push(kinds);
    }
    Ok(SyntheticData { corpora, trace, labels })
}

/// Positions of query sentences per corpus.
pub fn query_positions(trace: &[Vec<SentenceKind>]) -> Vec<Vec<usize>> {
    trace
        .iter()
        .map(|kinds| {
            kinds
                .iter()
                .enumerate()
                .filter(|(_, k)| matches!(k, SentenceKind::Query { .. }))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}
