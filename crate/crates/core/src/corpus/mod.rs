//! Token/label corpora, vocabularies, frozen word vectors, precomputed
//! contextual representations, and padded batches.
//!
//! Corpus files are UTF-8, one `token<TAB>label` per line, with a blank line
//! between sentences and a final newline. Label `1` marks the first token of
//! every discourse unit except the sentence's first one.

mod batch;
mod embeddings;
mod reps;
mod split;
mod vocab;

pub use batch::{make_batches, Batch};
pub use embeddings::{load_word_embeddings, parse_word_embeddings, write_word_embeddings, EmbeddingTable};
pub use reps::{load_contextual_reps, parse_contextual_reps, write_rep1, write_repjsonl, ContextualReps, REP_LAYERS};
pub use split::{apply_split, load_split, parse_split};
pub use vocab::{build_vocab, Vocab, PAD_ID, UNK_ID};

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Default cap on sentence length; longer sentences are rejected at load time.
pub const DEFAULT_MAX_LEN: usize = 200;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid sentence at line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("alignment error: {0}")]
    Alignment(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// One pre-tokenized sentence with per-token boundary labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    tokens: Vec<String>,
    labels: Vec<u8>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, labels: Vec<u8>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(CorpusError::Validation {
                line: 0,
                msg: "empty sentence".into(),
            });
        }
        if tokens.len() != labels.len() {
            return Err(CorpusError::Validation {
                line: 0,
                msg: format!("{} tokens but {} labels", tokens.len(), labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(CorpusError::Validation {
                line: 0,
                msg: format!("label {bad} is not 0 or 1"),
            });
        }
        if labels[0] != 0 {
            return Err(CorpusError::Validation {
                line: 0,
                msg: "the first token cannot carry a boundary label".into(),
            });
        }
        Ok(Sentence { tokens, labels })
    }

    /// A sentence with every label set to 0, for unlabeled input.
    pub fn unlabeled(tokens: Vec<String>) -> Result<Self> {
        let n = tokens.len();
        Sentence::new(tokens, vec![0; n])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Same tokens, new labels. Position 0 is forced to 0.
    pub fn relabeled(&self, labels: &[u8]) -> Result<Self> {
        let mut labels = labels.to_vec();
        if let Some(first) = labels.first_mut() {
            *first = 0;
        }
        Sentence::new(self.tokens.clone(), labels)
    }
}

/// Whether a corpus line must carry a label column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelColumn {
    Required,
    /// Lines without a tab are read as label 0.
    Optional,
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusOptions {
    pub max_len: usize,
    pub labels: LabelColumn,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            max_len: DEFAULT_MAX_LEN,
            labels: LabelColumn::Required,
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    load_corpus_with(path, CorpusOptions::default())
}

pub fn load_corpus_with(path: impl AsRef<Path>, opts: CorpusOptions) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_corpus(&text, opts)
}

pub fn parse_corpus(text: &str, opts: CorpusOptions) -> Result<Vec<Sentence>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    if !text.ends_with('\n') {
        return Err(CorpusError::Format("missing final newline".into()));
    }
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut start_line = 1;
    let lines: Vec<&str> = text[..text.len() - 1].split('\n').collect();
    let last = lines.len();

    for (i, raw) in lines.iter().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            // A single blank line may trail the final sentence.
            if tokens.is_empty() && !(line_no == last && !sentences.is_empty()) {
                return Err(CorpusError::Validation {
                    line: line_no,
                    msg: "empty sentence".into(),
                });
            }
            if !tokens.is_empty() {
                sentences.push(finish_sentence(&mut tokens, &mut labels, start_line, opts)?);
            }
            start_line = line_no + 1;
            continue;
        }
        let (token, label) = match line.split_once('\t') {
            Some((tok, lab)) => {
                let label = match lab {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(CorpusError::Parse {
                            line: line_no,
                            msg: format!("label {other:?} is not 0 or 1"),
                        })
                    }
                };
                (tok, label)
            }
            None if opts.labels == LabelColumn::Optional => (line, 0),
            None => {
                return Err(CorpusError::Parse {
                    line: line_no,
                    msg: "expected token<TAB>label".into(),
                })
            }
        };
        if token.is_empty() {
            return Err(CorpusError::Parse {
                line: line_no,
                msg: "empty token".into(),
            });
        }
        if tokens.is_empty() && label == 1 {
            return Err(CorpusError::Validation {
                line: line_no,
                msg: "the first token cannot carry a boundary label".into(),
            });
        }
        tokens.push(token.to_string());
        labels.push(label);
    }
    if !tokens.is_empty() {
        sentences.push(finish_sentence(&mut tokens, &mut labels, start_line, opts)?);
    }
    Ok(sentences)
}

fn finish_sentence(
    tokens: &mut Vec<String>,
    labels: &mut Vec<u8>,
    start_line: usize,
    opts: CorpusOptions,
) -> Result<Sentence> {
    if tokens.len() > opts.max_len {
        return Err(CorpusError::Validation {
            line: start_line,
            msg: format!("{} tokens exceeds the limit of {}", tokens.len(), opts.max_len),
        });
    }
    Sentence::new(std::mem::take(tokens), std::mem::take(labels)).map_err(|e| match e {
        CorpusError::Validation { msg, .. } => CorpusError::Validation { line: start_line, msg },
        other => other,
    })
}

/// Renders sentences in the normalized corpus format.
pub fn format_corpus(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, lab) in s.tokens.iter().zip(&s.labels) {
            out.push_str(tok);
            out.push('\t');
            out.push(if *lab == 1 { '1' } else { '0' });
            out.push('\n');
        }
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_corpus(sentences)).map_err(|e| CorpusError::io(path, e))
}
