use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CorpusError, Result, Vocab, PAD_ID, UNK_ID};
use crate::tensor::{Real, Tensor};

/// Word vectors indexed by vocabulary id. Rows for PAD and UNK are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    table: Tensor<T>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn new(table: Tensor<T>) -> Result<Self> {
        if table.shape().len() != 2 || table.shape()[0] < 2 {
            return Err(CorpusError::Format(format!(
                "embedding table must be |V|×D with |V| ≥ 2, got {:?}",
                table.shape()
            )));
        }
        Ok(EmbeddingTable { table })
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EmbeddingTable {
            table: Tensor::zeros(vec![vocab_size.max(2), dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn row(&self, id: usize) -> &[T] {
        self.table.row(id)
    }

    pub fn trainable(&self) -> bool {
        self.table.requires_grad()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.table.set_requires_grad(trainable);
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.table
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.table
    }
}

pub fn load_word_embeddings(path: impl AsRef<Path>, vocab: &Vocab) -> Result<EmbeddingTable<f32>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_word_embeddings(&text, vocab)
}

/// Parses `token v1 v2 … vD` lines. The first entry fixes `D`; tokens absent
/// from the file keep zero rows; the first occurrence of a token wins.
pub fn parse_word_embeddings(text: &str, vocab: &Vocab) -> Result<EmbeddingTable<f32>> {
    let mut dim: Option<usize> = None;
    let mut rows: Vec<(usize, Vec<f32>)> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| {
                f.parse::<f32>().map_err(|_| CorpusError::Parse {
                    line: line_no,
                    msg: format!("non-numeric embedding field {f:?}"),
                })
            })
            .collect::<Result<Vec<f32>>>()?;
        match dim {
            None if values.is_empty() => {
                return Err(CorpusError::Format(format!("line {line_no}: entry has no vector")));
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(CorpusError::Format(format!(
                    "line {line_no}: dimension {} differs from {d}",
                    values.len()
                )));
            }
            Some(_) => {}
        }
        if let Some(id) = vocab.get(token) {
            if seen.insert(id) {
                rows.push((id, values));
            }
        }
    }
    let dim = dim.ok_or_else(|| CorpusError::Format("embedding file has no entries".into()))?;
    let mut table = Tensor::zeros(vec![vocab.len(), dim]);
    for (id, values) in rows {
        if id == PAD_ID || id == UNK_ID {
            continue;
        }
        table.values_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
    }
    EmbeddingTable::new(table)
}

/// Writes every non-reserved vocabulary row in the plain-text vector format.
pub fn write_word_embeddings(path: impl AsRef<Path>, vocab: &Vocab, table: &EmbeddingTable<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (offset, tok) in vocab.tokens().iter().enumerate() {
        out.push_str(tok);
        for v in table.row(offset + 2) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CorpusError::io(path, e))
}
