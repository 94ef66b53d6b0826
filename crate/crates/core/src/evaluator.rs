//! Boundary precision, recall, and F1, micro-averaged over a corpus.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{ContextualReps, Sentence};
use crate::model::{self, Segmenter};
use crate::tensor::Real;

/// Positions labeled 1, excluding position 0 (never an intra-sentential boundary).
pub fn extract_boundaries(labels: &[u8]) -> BTreeSet<usize> {
    labels
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &l)| l == 1)
        .map(|(t, _)| t)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl SegMetrics {
    /// Derives the ratios from raw counts.
    ///
    /// A zero denominator yields 1 when the matching error count is also zero
    /// (nothing predicted, nothing missed) and F1 is 0 whenever `P + R = 0`.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        SegMetrics {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    /// Pools the counts of two results.
    pub fn merge(&self, other: &SegMetrics) -> SegMetrics {
        SegMetrics::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

impl fmt::Display for SegMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P {:.4}  R {:.4}  F1 {:.4}  (tp {}, fp {}, fn {})",
            self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_
        )
    }
}

pub fn prf1(gold: &BTreeSet<usize>, pred: &BTreeSet<usize>) -> SegMetrics {
    let tp = gold.intersection(pred).count();
    SegMetrics::from_counts(tp, pred.len() - tp, gold.len() - tp)
}

/// Micro-averaged metrics of paired label sequences.
pub fn score_labels<'s>(pairs: impl IntoIterator<Item = (&'s [u8], &'s [u8])>) -> SegMetrics {
    pairs.into_iter().fold(SegMetrics::from_counts(0, 0, 0), |acc, (gold, pred)| {
        acc.merge(&prf1(&extract_boundaries(gold), &extract_boundaries(pred)))
    })
}

/// Decodes every sentence and scores the pooled counts against its gold labels.
pub fn evaluate_corpus<T: Real>(
    model: &Segmenter<T>,
    sentences: &[Sentence],
    reps: Option<&ContextualReps>,
    batch_size: usize,
) -> model::Result<(SegMetrics, Vec<Vec<u8>>)> {
    let predicted = model.decode(sentences, reps, batch_size)?;
    let metrics = score_labels(sentences.iter().map(Sentence::labels).zip(predicted.iter().map(Vec::as_slice)));
    Ok((metrics, predicted))
}
