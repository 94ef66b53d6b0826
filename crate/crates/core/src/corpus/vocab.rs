use std::collections::HashMap;

use super::Sentence;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

const PAD_NAME: &str = "<pad>";
const UNK_NAME: &str = "<unk>";

/// Token ↔ id mapping with reserved padding and unknown ids.
///
/// The reserved entries live outside the token map, so a corpus token spelled
/// `<unk>` still receives its own id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from non-reserved tokens in id order (ids start at 2).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut names = vec![PAD_NAME.to_string(), UNK_NAME.to_string()];
        let mut index = HashMap::new();
        for tok in tokens {
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), names.len());
                names.push(tok);
            }
        }
        Vocab { names, index }
    }

    /// Id of `token`, or [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Total size including the two reserved ids.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.len() <= 2
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.names[2..]
    }
}

/// Tokens with frequency ≥ `min_count`, ordered by frequency (descending)
/// then lexicographically.
pub fn build_vocab<'s>(sentences: impl IntoIterator<Item = &'s Sentence>, min_count: usize) -> Vocab {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for tok in s.tokens() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocab::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
}
