//! REP1: precomputed per-token representations from a pretrained
//! bidirectional language model (three layers per token).
//!
//! Binary layout, little-endian:
//!
//! ```text
//! "REP1"  u32 sentence_count  u32 L  u32 D_c
//! per sentence: u32 T, then L·T·D_c f32 (layer-major, then token, then dimension)
//! ```
//!
//! A JSON-lines variant with one `{"layers": [[[..]]]}` object per sentence
//! is accepted for debugging and loads to identical values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Result, Sentence};

pub const REP_LAYERS: usize = 3;
const MAGIC: &[u8; 4] = b"REP1";

#[derive(Debug, Clone, PartialEq)]
pub struct ContextualReps {
    dim: usize,
    sentences: Vec<Vec<f32>>,
    lengths: Vec<usize>,
}

impl ContextualReps {
    /// `sentences[i]` holds `3 · lengths[i] · dim` values in layer-major order.
    pub fn new(dim: usize, sentences: Vec<Vec<f32>>, lengths: Vec<usize>) -> Result<Self> {
        if sentences.len() != lengths.len() {
            return Err(CorpusError::Format("sentence and length counts differ".into()));
        }
        for (i, (s, &t)) in sentences.iter().zip(&lengths).enumerate() {
            if s.len() != REP_LAYERS * t * dim {
                return Err(CorpusError::Format(format!(
                    "sentence {i}: expected {} values, found {}",
                    REP_LAYERS * t * dim,
                    s.len()
                )));
            }
        }
        Ok(ContextualReps { dim, sentences, lengths })
    }

    pub fn layers(&self) -> usize {
        REP_LAYERS
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn tokens(&self, sentence: usize) -> usize {
        self.lengths[sentence]
    }

    /// Flat `L×T×D_c` block for one sentence.
    pub fn sentence(&self, sentence: usize) -> &[f32] {
        &self.sentences[sentence]
    }

    /// The `T×D_c` slice for one layer of one sentence.
    pub fn layer(&self, sentence: usize, layer: usize) -> &[f32] {
        let block = self.lengths[sentence] * self.dim;
        &self.sentences[sentence][layer * block..(layer + 1) * block]
    }

    /// Checks sentence count and per-sentence token counts against a corpus.
    pub fn check_alignment(&self, corpus: &[Sentence]) -> Result<()> {
        if self.sentences.len() != corpus.len() {
            return Err(CorpusError::Alignment(format!(
                "representation file has {} sentences, corpus has {}",
                self.sentences.len(),
                corpus.len()
            )));
        }
        for (i, (s, &t)) in corpus.iter().zip(&self.lengths).enumerate() {
            if s.len() != t {
                return Err(CorpusError::Alignment(format!(
                    "sentence {i}: representation has {t} tokens, corpus has {}",
                    s.len()
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the listed sentences, in the given order.
    pub fn select(&self, indices: &[usize]) -> ContextualReps {
        ContextualReps {
            dim: self.dim,
            sentences: indices.iter().map(|&i| self.sentences[i].clone()).collect(),
            lengths: indices.iter().map(|&i| self.lengths[i]).collect(),
        }
    }
}

/// Loads REP1 (or its JSON-lines variant), optionally validating alignment
/// against the companion corpus.
pub fn load_contextual_reps(path: impl AsRef<Path>, corpus: Option<&[Sentence]>) -> Result<ContextualReps> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    let reps = parse_contextual_reps(&bytes)?;
    if let Some(corpus) = corpus {
        reps.check_alignment(corpus)?;
    }
    Ok(reps)
}

pub fn parse_contextual_reps(bytes: &[u8]) -> Result<ContextualReps> {
    match bytes.iter().find(|b| !b.is_ascii_whitespace()) {
        Some(b'{') => parse_jsonl(bytes),
        _ => parse_rep1(bytes),
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CorpusError::Format(format!(
                "unexpected end of REP1 data at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn parse_rep1(bytes: &[u8]) -> Result<ContextualReps> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(CorpusError::Format("bad magic: not a REP1 file".into()));
    }
    let count = r.u32()?;
    let layers = r.u32()?;
    let dim = r.u32()?;
    if layers != REP_LAYERS {
        return Err(CorpusError::Format(format!("expected {REP_LAYERS} layers, header says {layers}")));
    }
    let mut sentences = Vec::with_capacity(count.min(1 << 20));
    let mut lengths = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let t = r.u32()?;
        let raw = r.take(REP_LAYERS * t * dim * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        sentences.push(values);
        lengths.push(t);
    }
    if r.pos != bytes.len() {
        return Err(CorpusError::Format(format!(
            "{} trailing bytes after the last sentence",
            bytes.len() - r.pos
        )));
    }
    ContextualReps::new(dim, sentences, lengths)
}

#[derive(Serialize, Deserialize)]
struct JsonSentence {
    layers: Vec<Vec<Vec<f32>>>,
}

fn parse_jsonl(bytes: &[u8]) -> Result<ContextualReps> {
    let text = std::str::from_utf8(bytes).map_err(|e| CorpusError::Format(format!("repjsonl is not UTF-8: {e}")))?;
    let mut dim: Option<usize> = None;
    let mut sentences = Vec::new();
    let mut lengths = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: JsonSentence = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if parsed.layers.len() != REP_LAYERS {
            return Err(CorpusError::Format(format!(
                "line {}: expected {REP_LAYERS} layers, found {}",
                i + 1,
                parsed.layers.len()
            )));
        }
        let t = parsed.layers[0].len();
        let mut flat = Vec::new();
        for layer in &parsed.layers {
            if layer.len() != t {
                return Err(CorpusError::Format(format!("line {}: ragged token axis", i + 1)));
            }
            for tok in layer {
                let d = *dim.get_or_insert(tok.len());
                if tok.len() != d {
                    return Err(CorpusError::Format(format!(
                        "line {}: dimension {} differs from {d}",
                        i + 1,
                        tok.len()
                    )));
                }
                flat.extend_from_slice(tok);
            }
        }
        sentences.push(flat);
        lengths.push(t);
    }
    ContextualReps::new(dim.unwrap_or(0), sentences, lengths)
}

/// Serializes to the binary REP1 layout.
pub fn write_rep1(reps: &ContextualReps) -> Vec<u8> {
    let payload: usize = reps.sentences.iter().map(|s| 4 + s.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(reps.len() as u32).to_le_bytes());
    out.extend_from_slice(&(REP_LAYERS as u32).to_le_bytes());
    out.extend_from_slice(&(reps.dim as u32).to_le_bytes());
    for (values, &t) in reps.sentences.iter().zip(&reps.lengths) {
        out.extend_from_slice(&(t as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serializes to the JSON-lines debug variant.
pub fn write_repjsonl(reps: &ContextualReps) -> String {
    let mut out = String::new();
    for i in 0..reps.len() {
        let t = reps.tokens(i);
        let layers = (0..REP_LAYERS)
            .map(|l| {
                reps.layer(i, l)
                    .chunks_exact(reps.dim.max(1))
                    .take(t)
                    .map(<[f32]>::to_vec)
                    .collect()
            })
            .collect();
        out.push_str(&serde_json::to_string(&JsonSentence { layers }).expect("serializable"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ContextualReps {
        let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        ContextualReps::new(4, vec![values], vec![2]).unwrap()
    }

    #[test]
    fn layout_is_layer_major() {
        let reps = parse_contextual_reps(&write_rep1(&sample())).unwrap();
        assert_eq!(reps.sentence(0).len(), 24);
        assert_eq!(reps.dim(), 4);
        assert_eq!(reps.tokens(0), 2);
        // layer 1, token 1, dim 2 → offset 1·8 + 1·4 + 2
        assert_eq!(reps.layer(0, 1)[4 + 2], 14.0 * 0.5 - 3.0);
    }

    #[test]
    fn header_bytes() {
        let bytes = write_rep1(&sample());
        assert_eq!(&bytes[..4], b"REP1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &4u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 4 + 24 * 4);
    }

    #[test]
    fn magic_mismatch() {
        let mut bytes = write_rep1(&sample());
        bytes[3] = b'2';
        assert!(matches!(parse_contextual_reps(&bytes), Err(CorpusError::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = write_rep1(&sample());
        assert!(matches!(
            parse_contextual_reps(&bytes[..bytes.len() - 1]),
            Err(CorpusError::Format(_))
        ));
    }

    #[test]
    fn alignment_errors_name_the_sentence() {
        let reps = sample();
        let one = Sentence::unlabeled(vec!["a".into()]).unwrap();
        let two = Sentence::unlabeled(vec!["a".into(), "b".into()]).unwrap();
        assert!(reps.check_alignment(std::slice::from_ref(&two)).is_ok());
        match reps.check_alignment(std::slice::from_ref(&one)) {
            Err(CorpusError::Alignment(msg)) => assert!(msg.contains("sentence 0")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(reps.check_alignment(&[two.clone(), two]), Err(CorpusError::Alignment(_))));
    }

    #[test]
    fn jsonl_variant_loads_identically() {
        let reps = sample();
        let text = write_repjsonl(&reps);
        assert_eq!(parse_contextual_reps(text.as_bytes()).unwrap(), reps);
    }
}
