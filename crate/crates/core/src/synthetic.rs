//! Seeded generators for rule-labeled corpora, random word vectors, and
//! random contextual representations.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{ContextualReps, EmbeddingTable, Sentence, Vocab, REP_LAYERS};
use crate::tensor::Tensor;

/// Tokens that open a new unit in [`connective_corpus`].
pub const CONNECTIVES: [&str; 3] = ["because", "which", "when"];

/// Token whose presence marks a boundary a fixed distance to its right in [`lag_corpus`].
pub const TRIGGER: &str = "mark";

fn filler(rng: &mut impl Rng, vocab_size: usize) -> String {
    format!("w{}", rng.random_range(0..vocab_size))
}

/// Sentences of 6–20 filler tokens with up to three connectives spliced in
/// after position 0. A token is labeled 1 exactly when it is a connective.
pub fn connective_corpus(count: usize, seed: u64) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.random_range(6..=20);
            let mut tokens: Vec<String> = (0..len).map(|_| filler(&mut rng, 40)).collect();
            for _ in 0..rng.random_range(0..=3) {
                let at = rng.random_range(1..len);
                tokens[at] = CONNECTIVES.choose(&mut rng).expect("non-empty").to_string();
            }
            let labels = tokens.iter().map(|t| CONNECTIVES.contains(&t.as_str()) as u8).collect();
            Sentence::new(tokens, labels).expect("generated labels are valid")
        })
        .collect()
}

/// Sentences of 8–24 filler tokens with a few trigger tokens; position `t`
/// is labeled 1 exactly when token `t − lag` is the trigger.
pub fn lag_corpus(count: usize, lag: usize, seed: u64) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.random_range(8..=24).max(lag + 2);
            let mut tokens: Vec<String> = (0..len).map(|_| filler(&mut rng, 40)).collect();
            for _ in 0..rng.random_range(1..=3) {
                let at = rng.random_range(0..len - lag);
                tokens[at] = TRIGGER.to_string();
            }
            let labels = (0..len)
                .map(|t| (t >= lag.max(1) && tokens[t - lag] == TRIGGER) as u8)
                .collect();
            Sentence::new(tokens, labels).expect("generated labels are valid")
        })
        .collect()
}

/// Uniform `[-0.5, 0.5)` vectors for every vocabulary entry except the
/// reserved padding and unknown rows, which stay zero.
pub fn random_embeddings(vocab: &Vocab, dim: usize, seed: u64) -> EmbeddingTable<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reserved = vocab.len() - vocab.tokens().len();
    let table = Tensor::from_fn(vec![vocab.len(), dim], |i| {
        if i / dim < reserved {
            0.0
        } else {
            rng.random_range(-0.5..0.5)
        }
    });
    EmbeddingTable::new(table).expect("rank-2 table")
}

/// Standard-normal representations aligned with `sentences`, drawn in file
/// order (sentence, layer, token, dimension) from a ChaCha8 stream.
pub fn random_reps(sentences: &[Sentence], dim: usize, seed: u64) -> ContextualReps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = sentences
        .iter()
        .map(|s| (0..REP_LAYERS * s.len() * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect();
    ContextualReps::new(dim, values, sentences.iter().map(Sentence::len).collect()).expect("consistent sizes")
}
