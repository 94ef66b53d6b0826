//! The full segmenter: encoder followed by the CRF head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Batch, ContextualReps, EmbeddingTable, Sentence, Vocab};
use crate::crf::{self, CrfError, CrfNllOp, CrfParams, LatticeScores, NUM_LABELS};
use crate::encoder::{self, encode_graph, EncoderConfig, EncoderError, EncoderParams};
use crate::tensor::{Gradients, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model configuration: {0}")]
    Config(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter<T> {
    pub vocab: Vocab,
    pub encoder: EncoderParams<T>,
    pub crf: CrfParams<T>,
}

impl<T: Real> Segmenter<T> {
    pub fn init(config: EncoderConfig, vocab: Vocab, embeddings: EmbeddingTable<T>, rng: &mut impl Rng) -> Result<Self> {
        if embeddings.rows() != vocab.len() {
            return Err(ModelError::Config(format!(
                "embedding table has {} rows for a vocabulary of {}",
                embeddings.rows(),
                vocab.len()
            )));
        }
        let encoder = EncoderParams::init(config, embeddings, rng)?;
        let d = encoder.output_dim();
        let limit = (6.0 / (d + NUM_LABELS) as f64).sqrt();
        let weight = Tensor::from_fn(vec![d, NUM_LABELS], |_| T::cast(rng.random_range(-limit..limit)));
        let crf = CrfParams::new(weight)?;
        Ok(Segmenter { vocab, encoder, crf })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named_tensors();
        out.extend(crf_names().into_iter().zip([
            &self.crf.weight,
            &self.crf.bias,
            &self.crf.transitions,
            &self.crf.start,
            &self.crf.end,
        ]));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.encoder.named_tensors_mut();
        out.extend(crf_names().into_iter().zip([
            &mut self.crf.weight,
            &mut self.crf.bias,
            &mut self.crf.transitions,
            &mut self.crf.start,
            &mut self.crf.end,
        ]));
        out
    }

    /// Names and values of the trainable tensors only.
    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_tensors().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Segmenter<U> {
        let mut out = Segmenter {
            vocab: self.vocab.clone(),
            encoder: cast_encoder(&self.encoder),
            crf: CrfParams {
                weight: self.crf.weight.cast(),
                bias: self.crf.bias.cast(),
                transitions: self.crf.transitions.cast(),
                start: self.crf.start.cast(),
                end: self.crf.end.cast(),
            },
        };
        for ((_, dst), (_, src)) in out.named_tensors_mut().into_iter().zip(self.named_tensors()) {
            dst.set_requires_grad(src.requires_grad());
        }
        out
    }

    /// Emission scores `(B·T_max)×|Y|` on the graph.
    pub fn emissions_graph<'a>(&'a self, g: &mut Graph<'a, T>, batch: &Batch, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let h = encode_graph(g, &self.encoder, batch, dropout)?;
        let w = g.param("crf.weight", &self.crf.weight);
        let b = g.param("crf.bias", &self.crf.bias);
        let e = g.matmul(h, w)?;
        Ok(g.add_bias(e, b)?)
    }

    /// Summed NLL of the batch times `scale`, as a scalar graph node.
    pub fn loss_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        batch: &Batch,
        scale: f64,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let e = self.emissions_graph(g, batch, dropout)?;
        let trans = g.param("crf.transitions", &self.crf.transitions);
        let start = g.param("crf.start", &self.crf.start);
        let end = g.param("crf.end", &self.crf.end);
        let op = CrfNllOp {
            lengths: batch.lengths.clone(),
            t_max: batch.t_max,
            gold: (0..batch.size()).map(|b| batch.gold(b).to_vec()).collect(),
            scale,
        };
        Ok(g.custom(&[e, trans, start, end], Box::new(op))?)
    }

    /// Loss value (`scale ×` summed NLL) and gradients of every trainable tensor.
    pub fn loss_and_grads(&self, batch: &Batch, scale: f64, dropout: Option<&mut ChaCha8Rng>) -> Result<(f64, Gradients<T>)> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, batch, scale, dropout)?;
        let value = g.value(loss)[0].as_f64();
        let grads = g.backward(loss)?;
        Ok((value, grads))
    }

    /// Mean per-sentence NLL of a batch without dropout.
    pub fn mean_loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, batch, 1.0 / batch.size().max(1) as f64, None)?;
        Ok(g.value(loss)[0].as_f64())
    }

    /// Per-sentence emission lattices of a batch (inference mode).
    pub fn lattices(&self, batch: &Batch) -> Result<Vec<LatticeScores<T>>> {
        let mut g = Graph::new();
        let e = self.emissions_graph(&mut g, batch, None)?;
        let values = g.value(e);
        batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                let start = b * batch.t_max * NUM_LABELS;
                Ok(LatticeScores::new(values[start..start + n * NUM_LABELS].to_vec())?)
            })
            .collect()
    }

    /// Viterbi labels for every sentence of a batch.
    pub fn decode_batch(&self, batch: &Batch) -> Result<Vec<Vec<u8>>> {
        let pot = self.crf.potentials();
        Ok(self.lattices(batch)?.iter().map(|l| crf::viterbi(l, pot).0).collect())
    }

    /// Decodes a whole corpus in batches of `batch_size`, preserving order.
    pub fn decode(&self, sentences: &[Sentence], reps: Option<&ContextualReps>, batch_size: usize) -> Result<Vec<Vec<u8>>> {
        self.check_inputs(reps)?;
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in (0..sentences.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
            let batch = Batch::from_indices(sentences, &self.vocab, reps, chunk);
            out.extend(self.decode_batch(&batch)?);
        }
        Ok(out)
    }

    /// Like [`Segmenter::decode`], splitting the corpus across `workers` threads.
    pub fn decode_parallel(
        &self,
        sentences: &[Sentence],
        reps: Option<&ContextualReps>,
        batch_size: usize,
        workers: usize,
    ) -> Result<Vec<Vec<u8>>> {
        self.check_inputs(reps)?;
        let indices: Vec<usize> = (0..sentences.len()).collect();
        let batches: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
        if workers <= 1 || batches.len() <= 1 {
            return self.decode(sentences, reps, batch_size);
        }
        let per_worker = batches.len().div_ceil(workers);
        let results: Vec<Result<Vec<Vec<u8>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .chunks(per_worker)
                .map(|group| {
                    s.spawn(move || {
                        let mut out = Vec::new();
                        for chunk in group {
                            let batch = Batch::from_indices(sentences, &self.vocab, reps, chunk);
                            out.extend(self.decode_batch(&batch)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(sentences.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Rejects a representation file the configuration cannot use, or a
    /// missing one it needs.
    pub fn check_inputs(&self, reps: Option<&ContextualReps>) -> Result<()> {
        let cfg = self.config();
        match (cfg.use_elmo, reps) {
            (true, None) => Err(ModelError::Config("model uses contextual representations but none were given".into())),
            (true, Some(r)) if r.dim() != cfg.rep_dim => Err(ModelError::Config(format!(
                "representations are {}-dimensional, the model expects {}",
                r.dim(),
                cfg.rep_dim
            ))),
            _ => Ok(()),
        }
    }
}

fn crf_names() -> Vec<String> {
    ["crf.weight", "crf.bias", "crf.transitions", "crf.start", "crf.end"]
        .map(String::from)
        .to_vec()
}

fn cast_encoder<T: Real, U: Real>(p: &EncoderParams<T>) -> EncoderParams<U> {
    let lstm = |l: &encoder::BiLstmParams<T>| encoder::BiLstmParams {
        forward: encoder::LstmParams {
            w_ih: l.forward.w_ih.cast(),
            w_hh: l.forward.w_hh.cast(),
            bias: l.forward.bias.cast(),
        },
        backward: encoder::LstmParams {
            w_ih: l.backward.w_ih.cast(),
            w_hh: l.backward.w_hh.cast(),
            bias: l.backward.bias.cast(),
        },
    };
    EncoderParams {
        config: p.config,
        embeddings: EmbeddingTable::new(p.embeddings.tensor().cast()).expect("same shape"),
        mix: p.mix.as_ref().map(|m| encoder::MixWeights {
            raw: m.raw.cast(),
            gamma: m.gamma.cast(),
        }),
        lstm: lstm(&p.lstm),
        attention: p.attention.as_ref().map(|a| encoder::AttentionParams {
            weight: a.weight.cast(),
            window: a.window,
        }),
        fusion: p.fusion.as_ref().map(lstm),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::corpus::build_vocab;
    use crate::encoder::Window;

    fn setup(use_attention: bool) -> (Segmenter<f64>, Vec<Sentence>) {
        let sentences: Vec<Sentence> = [vec![0u8, 0, 1, 0], vec![0, 1, 0], vec![0, 0, 0, 0, 1, 0]]
            .into_iter()
            .enumerate()
            .map(|(i, labels)| {
                let tokens = (0..labels.len()).map(|t| format!("t{}", (i + t) % 5)).collect();
                Sentence::new(tokens, labels).unwrap()
            })
            .collect();
        let vocab = build_vocab(&sentences, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = Tensor::from_fn(vec![vocab.len(), 4], |_| rng.random_range(-1.0..1.0));
        let config = EncoderConfig {
            hidden: 3,
            word_dim: 4,
            rep_dim: 0,
            use_elmo: false,
            use_attention,
            window: Window::Bounded(1),
            dropout: 0.1,
        };
        let model = Segmenter::init(config, vocab, EmbeddingTable::new(table).unwrap(), &mut rng).unwrap();
        (model, sentences)
    }

    #[test]
    fn batch_loss_is_sum_of_sentence_losses() {
        let (model, sentences) = setup(true);
        let batch = Batch::from_indices(&sentences, &model.vocab, None, &[0, 1, 2]);
        let (total, _) = model.loss_and_grads(&batch, 1.0, None).unwrap();
        let mut sum = 0.0;
        for i in 0..3 {
            let one = Batch::from_indices(&sentences, &model.vocab, None, &[i]);
            let lattice = &model.lattices(&one).unwrap()[0];
            sum += crf::nll(lattice, model.crf.potentials(), sentences[i].labels()).unwrap();
        }
        assert!((total - sum).abs() < 1e-10);
        assert!((model.mean_loss(&batch).unwrap() - sum / 3.0).abs() < 1e-10);
    }

    #[test]
    fn frozen_embeddings_get_no_gradient() {
        let (model, sentences) = setup(false);
        let batch = Batch::from_indices(&sentences, &model.vocab, None, &[0, 1]);
        let (_, grads) = model.loss_and_grads(&batch, 0.5, None).unwrap();
        assert!(grads.get("encoder.embeddings").is_none());
        assert!(grads.get("crf.transitions").is_some());
        let names: Vec<String> = model.trainable().into_iter().map(|(n, _)| n).collect();
        assert_eq!(grads.len(), names.len());
    }

    #[test]
    fn cast_preserves_decodes() {
        let (model, sentences) = setup(true);
        let single: Segmenter<f32> = model.cast();
        let back: Segmenter<f64> = single.cast();
        assert_eq!(back.cast::<f32>(), single);
        assert_eq!(
            single.decode(&sentences, None, 2).unwrap(),
            single.decode_parallel(&sentences, None, 1, 3).unwrap()
        );
    }

    #[test]
    fn reps_requirement_is_checked() {
        let (mut model, sentences) = setup(false);
        model.encoder.config.use_elmo = true;
        model.encoder.config.rep_dim = 2;
        assert!(matches!(model.decode(&sentences, None, 4), Err(ModelError::Config(_))));
    }
}
