use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ContextualReps, Sentence, Vocab, PAD_ID, REP_LAYERS};

/// A padded, masked group of sentences. All matrices are row-major with
/// `batch_size × t_max` leading layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Position of each row's sentence in the source corpus.
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
    /// `B×T_max`, PAD-filled.
    pub token_ids: Vec<usize>,
    /// `B×T_max`, true for real tokens.
    pub mask: Vec<bool>,
    /// `B×T_max`, 0 at padded positions.
    pub labels: Vec<u8>,
    /// `B×L×T_max×D_c` contextual block (zero at padded positions).
    pub reps: Option<Vec<f32>>,
    pub rep_dim: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// Builds one batch from the listed corpus sentences.
    pub fn from_indices(
        sentences: &[Sentence],
        vocab: &Vocab,
        reps: Option<&ContextualReps>,
        indices: &[usize],
    ) -> Batch {
        let lengths: Vec<usize> = indices.iter().map(|&i| sentences[i].len()).collect();
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let b = indices.len();
        let mut token_ids = vec![PAD_ID; b * t_max];
        let mut mask = vec![false; b * t_max];
        let mut labels = vec![0u8; b * t_max];
        for (row, &i) in indices.iter().enumerate() {
            let s = &sentences[i];
            for (t, (tok, &lab)) in s.tokens().iter().zip(s.labels()).enumerate() {
                token_ids[row * t_max + t] = vocab.id(tok);
                mask[row * t_max + t] = true;
                labels[row * t_max + t] = lab;
            }
        }
        let rep_dim = reps.map_or(0, ContextualReps::dim);
        let block = reps.map(|r| {
            let d = r.dim();
            let mut out = vec![0f32; b * REP_LAYERS * t_max * d];
            for (row, &i) in indices.iter().enumerate() {
                let n = r.tokens(i);
                for l in 0..REP_LAYERS {
                    let dst = ((row * REP_LAYERS + l) * t_max) * d;
                    out[dst..dst + n * d].copy_from_slice(r.layer(i, l));
                }
            }
            out
        });
        Batch {
            indices: indices.to_vec(),
            lengths,
            t_max,
            token_ids,
            mask,
            labels,
            reps: block,
            rep_dim,
        }
    }

    /// Gold labels of row `b`, unpadded.
    pub fn gold(&self, b: usize) -> &[u8] {
        &self.labels[b * self.t_max..b * self.t_max + self.lengths[b]]
    }
}

/// Splits the corpus into batches of `batch_size`. Without a seed the corpus
/// order is kept; with one, the order is a deterministic shuffle.
pub fn make_batches(
    sentences: &[Sentence],
    vocab: &Vocab,
    reps: Option<&ContextualReps>,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|chunk| Batch::from_indices(sentences, vocab, reps, chunk))
        .collect()
}
