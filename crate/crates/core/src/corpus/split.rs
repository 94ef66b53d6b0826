//! Held-out split files: one 0-based sentence index per line naming the
//! sentences of a corpus that form the validation set. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{CorpusError, Result};

pub fn parse_split(text: &str) -> Result<BTreeSet<usize>> {
    let mut held_out = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let index = line.parse::<usize>().map_err(|_| CorpusError::Parse {
            line: n + 1,
            msg: format!("expected a sentence index, got {line:?}"),
        })?;
        if !held_out.insert(index) {
            return Err(CorpusError::Parse {
                line: n + 1,
                msg: format!("sentence {index} listed twice"),
            });
        }
    }
    Ok(held_out)
}

pub fn load_split(path: impl AsRef<Path>) -> Result<BTreeSet<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_split(&text)
}

/// Indices of the kept and held-out sentences of a corpus of `len`
/// sentences, each in corpus order.
pub fn apply_split(len: usize, held_out: &BTreeSet<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
    if let Some(&bad) = held_out.range(len..).next() {
        return Err(CorpusError::Alignment(format!(
            "split names sentence {bad} but the corpus has {len} sentences"
        )));
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..len).partition(|i| held_out.contains(i));
    Ok((train, val))
}
