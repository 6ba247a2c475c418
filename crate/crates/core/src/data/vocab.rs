use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::stm::{CLS_ID, PAD_ID, UNK_ID};

use super::Corpus;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const CLS_TOKEN: &str = "<cls>";

/// Lowercases, splits on whitespace, and splits every non-alphanumeric
/// character into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                current.push(ch);
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Token list where line number equals id; the first three entries are
/// PAD, UNK and CLS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("vocabulary token {t:?} appears twice")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Tokens seen at least `min_count` times, in first-appearance order.
    pub fn build(corpora: &[Corpus], min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        for s in corpora.iter().flat_map(|c| &c.sentences) {
            for tok in tokenize(&s.text) {
                let n = counts.entry(tok.clone()).or_insert_with(|| {
                    order.push(tok.clone());
                    0
                });
                *n += 1;
            }
        }
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), CLS_TOKEN.to_string()];
        tokens.extend(
            order
                .into_iter()
                .filter(|t| counts[t] >= min_count.max(1) && ![PAD_TOKEN, UNK_TOKEN, CLS_TOKEN].contains(&t.as_str())),
        );
        Self::from_tokens(tokens).expect("tokens are unique by construction")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let reserved = [(PAD_ID, PAD_TOKEN), (UNK_ID, UNK_TOKEN), (CLS_ID, CLS_TOKEN)];
        for (id, tok) in reserved {
            if tokens.get(id).map(String::as_str) != Some(tok) {
                return Err(Error::Config(format!("vocabulary line {} must be {tok}", id + 1)));
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SentenceRecord;

    fn corpus(texts: &[&str]) -> Vec<Corpus> {
        vec![Corpus {
            id: "c".into(),
            sentences: texts
                .iter()
                .enumerate()
                .map(|(i, t)| SentenceRecord {
                    corpus_id: "c".into(),
                    index: i,
                    text: t.to_string(),
                    label: "x".into(),
                })
                .collect(),
        }]
    }

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("Hello, world!"), vec!["hello", ",", "world", "!"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("it's"), vec!["it", "'", "s"]);
    }

    #[test]
    fn build_encode_and_unknowns() {
        let v = Vocab::build(&corpus(&["Hello, world!", "hello there"]), 1);
        assert_eq!(&v.tokens()[..4], &["<pad>", "<unk>", "<cls>", "hello"]);
        let ids = v.encode("Hello, world!");
        assert_eq!(ids, vec![3, 4, 5, 6]);
        assert_eq!(v.encode("goodbye"), vec![UNK_ID]);
        assert!(v.encode("").is_empty());
        let rare = Vocab::build(&corpus(&["a a b"]), 2);
        assert_eq!(rare.encode("b a"), vec![UNK_ID, 3]);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build(&corpus(&["one two", "three"]), 1);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("<unk>\n<pad>\n<cls>\n").is_err());
    }
}
