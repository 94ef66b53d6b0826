//! Adam with L2, global-norm clipping, parameter averaging, and
//! validation-based model selection.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{make_batches, Batch, ContextualReps, Sentence};
use crate::encoder::{EncoderConfig, Window};
use crate::evaluator::{evaluate_corpus, SegMetrics};
use crate::model::{ModelError, Segmenter};
use crate::tensor::{Gradients, Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training configuration: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub l2_weight: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    /// Ramp the averaging decay up as `min(decay, (1+n)/(10+n))` over the
    /// first updates so the average tracks training on short runs.
    pub ema_warmup: bool,
    pub window: Window,
    pub hidden: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub use_elmo: bool,
    pub use_attention: bool,
    /// Threads sharing each batch's forward/backward work.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            dropout: 0.1,
            l2_weight: 1e-4,
            clip_norm: 5.0,
            ema_decay: 0.9999,
            ema_warmup: true,
            window: Window::Bounded(5),
            hidden: 200,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            use_elmo: true,
            use_attention: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TrainError::Config(msg.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return bad("l2_weight must be a finite non-negative number");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        self.window.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn encoder_config(&self, word_dim: usize, rep_dim: usize) -> EncoderConfig {
        EncoderConfig {
            hidden: self.hidden,
            word_dim,
            rep_dim: if self.use_elmo { rep_dim } else { 0 },
            use_elmo: self.use_elmo,
            use_attention: self.use_attention,
            window: self.window,
            dropout: self.dropout,
        }
    }
}

/// Rescales every gradient by `max_norm / g` when the global norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(T::cast(max_norm / norm));
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: BTreeMap<String, Vec<T>>,
    pub second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Default for OptimizerState<T> {
    fn default() -> Self {
        OptimizerState {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One Adam update with bias correction. The L2 term `l2_weight · θ` is added
/// to each gradient before the moment updates. Tensors that do not require a
/// gradient are left alone; trainable tensors without a gradient entry are
/// treated as having a zero gradient.
pub fn adam_step<T: Real>(
    params: Vec<(String, &mut Tensor<T>)>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    l2_weight: f64,
) {
    state.step += 1;
    let (b1, b2, eps) = (T::cast(ADAM_BETA1), T::cast(ADAM_BETA2), T::cast(ADAM_EPSILON));
    let c1 = T::one() - b1.powi(state.step as i32);
    let c2 = T::one() - b2.powi(state.step as i32);
    let (lr, l2) = (T::cast(lr), T::cast(l2_weight));
    for (name, tensor) in params {
        if !tensor.requires_grad() {
            continue;
        }
        let n = tensor.len();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let g = grads.get(&name);
        for (i, theta) in tensor.values_mut().iter_mut().enumerate() {
            let gi = g.map_or(T::zero(), |g| g[i]) + l2 * *theta;
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Shadow copies of the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub decay: f64,
    pub updates: u64,
    pub shadow: BTreeMap<String, Vec<T>>,
}

impl<T: Real> EmaState<T> {
    /// Starts every shadow at the current value of each trainable tensor.
    pub fn new(decay: f64, model: &Segmenter<T>) -> Self {
        EmaState {
            decay,
            updates: 0,
            shadow: model
                .trainable()
                .into_iter()
                .map(|(name, t)| (name, t.values().to_vec()))
                .collect(),
        }
    }

    /// A copy of `model` with every shadowed tensor replaced by its average.
    pub fn apply(&self, model: &Segmenter<T>) -> Segmenter<T> {
        let mut out = model.clone();
        for (name, tensor) in out.named_tensors_mut() {
            if let Some(s) = self.shadow.get(&name) {
                tensor.values_mut().copy_from_slice(s);
            }
        }
        out
    }
}

/// `shadow ← decay·shadow + (1−decay)·param` for every shadowed tensor.
pub fn ema_update<'t, T: Real>(ema: &mut EmaState<T>, params: impl IntoIterator<Item = (String, &'t Tensor<T>)>, decay: f64) {
    let d = T::cast(decay);
    let rest = T::one() - d;
    for (name, tensor) in params {
        if let Some(s) = ema.shadow.get_mut(&name) {
            for (sv, &p) in s.iter_mut().zip(tensor.values()) {
                *sv = d * *sv + rest * p;
            }
        }
    }
    ema.updates += 1;
}

/// Decay used for the next update under the configured schedule.
pub fn effective_decay(config: &TrainConfig, updates: u64) -> f64 {
    if config.ema_warmup {
        config.ema_decay.min((1.0 + updates as f64) / (10.0 + updates as f64))
    } else {
        config.ema_decay
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_p: f64,
    pub val_r: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

/// A corpus slice plus its optional contextual representations.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'d> {
    pub sentences: &'d [Sentence],
    pub reps: Option<&'d ContextualReps>,
}

impl<'d> Dataset<'d> {
    pub fn new(sentences: &'d [Sentence], reps: Option<&'d ContextualReps>) -> Self {
        Dataset { sentences, reps }
    }
}

/// Raw weights with their optimizer and averaging state.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub model: Segmenter<T>,
    pub optimizer: OptimizerState<T>,
    pub ema: EmaState<T>,
}

impl<T: Real> Snapshot<T> {
    /// The model with averaged weights, used for evaluation and inference.
    pub fn averaged(&self) -> Segmenter<T> {
        self.ema.apply(&self.model)
    }
}

pub struct TrainOutcome<T> {
    /// State at the end of the selected epoch.
    pub best: Snapshot<T>,
    pub best_epoch: usize,
    pub best_metrics: SegMetrics,
    /// State after the last epoch run.
    pub last: Snapshot<T>,
    pub history: Vec<EpochMetrics>,
}

/// Mutable training state carried across steps.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Segmenter<T>,
    pub optimizer: OptimizerState<T>,
    pub ema: EmaState<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, model: Segmenter<T>) -> Result<Self> {
        config.validate()?;
        let ema = EmaState::new(config.ema_decay, &model);
        Ok(Trainer {
            config,
            model,
            optimizer: OptimizerState::default(),
            ema,
        })
    }

    /// Forward, backward, clip, Adam, and EMA on one batch. Returns the mean
    /// per-sentence NLL before the update.
    pub fn step(&mut self, batch: &Batch, dropout_seed: Option<u64>) -> Result<f64> {
        let (loss, mut grads) = self.batch_gradients(batch, dropout_seed)?;
        if !loss.is_finite() {
            return Ok(loss);
        }
        clip_gradients(&mut grads, self.config.clip_norm);
        adam_step(
            self.model.named_tensors_mut(),
            &grads,
            &mut self.optimizer,
            self.config.learning_rate,
            self.config.l2_weight,
        );
        let decay = effective_decay(&self.config, self.ema.updates);
        ema_update(&mut self.ema, self.model.named_tensors(), decay);
        Ok(loss)
    }

    /// Mean NLL and its gradients, with sentences split across workers and
    /// partial gradients summed in worker order.
    fn batch_gradients(&self, batch: &Batch, dropout_seed: Option<u64>) -> Result<(f64, Gradients<T>)> {
        let scale = 1.0 / batch.size() as f64;
        let workers = self.config.workers.min(batch.size()).max(1);
        let rng_for = |part: u64| dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ part.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        if workers == 1 {
            let mut rng = rng_for(0);
            return Ok(self.model.loss_and_grads(batch, scale, rng.as_mut())?);
        }
        let per = batch.size().div_ceil(workers);
        let parts: Vec<Batch> = batch.indices.chunks(per).map(|c| sub_batch(batch, c)).collect();
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = parts
                .iter()
                .enumerate()
                .map(|(k, part)| {
                    let mut rng = rng_for(k as u64);
                    s.spawn(move || self.model.loss_and_grads(part, scale, rng.as_mut()))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
        });
        let mut loss = 0.0;
        let mut grads = Gradients::new();
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.merge(&g);
        }
        Ok((loss, grads))
    }

    /// The model with averaged weights, used for evaluation and inference.
    pub fn averaged(&self) -> Segmenter<T> {
        self.ema.apply(&self.model)
    }

    pub fn snapshot(&self) -> Snapshot<T> {
        Snapshot {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            ema: self.ema.clone(),
        }
    }
}

/// Rows of `batch` whose corpus indices are listed, re-padded to their own maximum length.
fn sub_batch(batch: &Batch, indices: &[usize]) -> Batch {
    let rows: Vec<usize> = indices
        .iter()
        .map(|i| batch.indices.iter().position(|j| j == i).expect("index from this batch"))
        .collect();
    let lengths: Vec<usize> = rows.iter().map(|&r| batch.lengths[r]).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let token_ids = pick_rows(&batch.token_ids, &rows, batch.t_max, t_max);
    let mask = pick_rows(&batch.mask, &rows, batch.t_max, t_max);
    let labels = pick_rows(&batch.labels, &rows, batch.t_max, t_max);
    let reps = batch.reps.as_ref().map(|block| {
        let d = batch.rep_dim;
        let layers = crate::corpus::REP_LAYERS;
        let mut out = Vec::with_capacity(rows.len() * layers * t_max * d);
        for &r in &rows {
            for l in 0..layers {
                let start = (r * layers + l) * batch.t_max * d;
                out.extend_from_slice(&block[start..start + t_max * d]);
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
        reps,
        rep_dim: batch.rep_dim,
    }
}

fn pick_rows<V: Copy>(src: &[V], rows: &[usize], stride: usize, width: usize) -> Vec<V> {
    rows.iter().flat_map(|&r| src[r * stride..r * stride + width].iter().copied()).collect()
}

/// Seed of the shuffle for a given epoch (1-based).
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(epoch as u64)
}

/// Runs the full training loop. `on_epoch` sees each epoch's metrics as soon
/// as they are known.
///
/// Each epoch shuffles the training set, steps through its batches, then
/// decodes the validation set with the averaged weights. The epoch with the
/// best validation F1 is kept (ties go to the earlier epoch); training stops
/// after `patience` epochs without improvement. With an empty validation set
/// the last epoch is kept and training runs for `max_epochs`.
pub fn train<T: Real>(
    model: Segmenter<T>,
    config: &TrainConfig,
    train_set: Dataset<'_>,
    val_set: Dataset<'_>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    if train_set.sentences.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    model.check_inputs(train_set.reps)?;
    if !val_set.sentences.is_empty() {
        model.check_inputs(val_set.reps)?;
    }
    let mut trainer = Trainer::new(*config, model)?;
    let mut best: Option<(Snapshot<T>, usize, SegMetrics)> = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let total: usize = train_set.sentences.len();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let seed = epoch_seed(config.seed, epoch);
        let batches = make_batches(train_set.sentences, &trainer.model.vocab, train_set.reps, config.batch_size, Some(seed));
        let mut nll_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let dropout_seed = (config.dropout > 0.0).then(|| seed.wrapping_mul(0x9E37_79B9).wrapping_add(b as u64));
            let loss = trainer.step(batch, dropout_seed)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b, loss });
            }
            nll_sum += loss * batch.size() as f64;
        }

        let averaged = trainer.averaged();
        let metrics = if val_set.sentences.is_empty() {
            SegMetrics::from_counts(0, 0, 0)
        } else {
            evaluate_corpus(&averaged, val_set.sentences, val_set.reps, config.batch_size)?.0
        };
        let record = EpochMetrics {
            epoch,
            train_nll: nll_sum / total as f64,
            val_p: metrics.precision,
            val_r: metrics.recall,
            val_f1: metrics.f1,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);

        let improved = val_set.sentences.is_empty() || best.as_ref().is_none_or(|(_, _, m)| metrics.f1 > m.f1);
        if improved {
            best = Some((trainer.snapshot(), epoch, metrics));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let last = trainer.snapshot();
    let (best, best_epoch, best_metrics) = best.unwrap_or_else(|| (last.clone(), 0, SegMetrics::from_counts(0, 0, 0)));
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metrics,
        last,
        history,
    })
}

#[cfg(test)]
mod tests;
