//! Token sequence → contextual hidden states.
//!
//! Pipeline per batch: word embeddings (optionally concatenated with a learned
//! softmax-weighted, γ-scaled mix of three precomputed LM layers) → dropout →
//! BiLSTM → optional windowed self-attention + fusion BiLSTM → dropout.
//!
//! Every stage works on padded `(B·T_max)×D` matrices. A sentence's rows depend
//! only on its own real tokens, so results do not change with batch
//! composition.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{Batch, EmbeddingTable, REP_LAYERS};
use crate::tensor::kernels::{axpy, dot};
use crate::tensor::{CustomOp, Graph, OpInput, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

/// Attention window radius `K`, or the whole sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Window {
    Bounded(usize),
    Unbounded,
}

impl Window {
    pub fn bounded(k: usize) -> Result<Self> {
        if k < 1 {
            return Err(EncoderError::Config("attention window must be at least 1".into()));
        }
        Ok(Window::Bounded(k))
    }

    pub fn validate(self) -> Result<Self> {
        match self {
            Window::Bounded(k) => Window::bounded(k),
            Window::Unbounded => Ok(self),
        }
    }

    /// Inclusive `[lo, hi]` key range for query `i` in a sentence of length `n`.
    pub fn span(self, i: usize, n: usize) -> (usize, usize) {
        match self {
            Window::Bounded(k) => (i.saturating_sub(k), (i + k).min(n - 1)),
            Window::Unbounded => (0, n - 1),
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Bounded(k) => write!(f, "{k}"),
            Window::Unbounded => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Window {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "unbounded" | "∞" => Ok(Window::Unbounded),
            other => {
                let k = other
                    .parse::<usize>()
                    .map_err(|_| EncoderError::Config(format!("invalid window {s:?}: expected a positive integer or \"inf\"")))?;
                Window::bounded(k)
            }
        }
    }
}

impl Serialize for Window {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Window::Bounded(k) => s.serialize_u64(*k as u64),
            Window::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Window::bounded(k as usize).map_err(serde::de::Error::custom),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Architecture switches and sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden units per LSTM direction.
    pub hidden: usize,
    pub word_dim: usize,
    /// Contextual representation width (ignored unless `use_elmo`).
    pub rep_dim: usize,
    pub use_elmo: bool,
    pub use_attention: bool,
    pub window: Window,
    pub dropout: f64,
}

/// Gate order within the `4H` axis: input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    /// `D_in×4H`
    pub w_ih: Tensor<T>,
    /// `H×4H`
    pub w_hh: Tensor<T>,
    /// `4H`
    pub bias: Tensor<T>,
}

fn glorot<T: Real>(rows: usize, cols: usize, shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::cast(rng.random_range(-bound..=bound))).with_grad(true)
}

impl<T: Real> LstmParams<T> {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut bias = vec![T::zero(); 4 * hidden];
        bias[hidden..2 * hidden].fill(T::one());
        LstmParams {
            w_ih: glorot(input_dim, 4 * hidden, vec![input_dim, 4 * hidden], rng),
            w_hh: glorot(hidden, 4 * hidden, vec![hidden, 4 * hidden], rng),
            bias: Tensor::new(vec![4 * hidden], bias).expect("sized").with_grad(true),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams<T> {
    pub forward: LstmParams<T>,
    pub backward: LstmParams<T>,
}

impl<T: Real> BiLstmParams<T> {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstmParams {
            forward: LstmParams::init(input_dim, hidden, rng),
            backward: LstmParams::init(input_dim, hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    /// Output width, `2H`.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }

    /// The same layer with its two directions exchanged.
    pub fn swapped(&self) -> Self {
        BiLstmParams {
            forward: self.backward.clone(),
            backward: self.forward.clone(),
        }
    }
}

/// Softmax-normalized layer weights and a global scale for the LM mix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights<T> {
    /// Unnormalized, one per layer.
    pub raw: Tensor<T>,
    /// Single-element scale γ.
    pub gamma: Tensor<T>,
}

impl<T: Real> MixWeights<T> {
    pub fn new(raw: [T; REP_LAYERS], gamma: T) -> Self {
        MixWeights {
            raw: Tensor::new(vec![REP_LAYERS], raw.to_vec()).expect("sized").with_grad(true),
            gamma: Tensor::scalar(gamma).with_grad(true),
        }
    }

    /// Normalized layer weights; positive and summing to one.
    pub fn normalized(&self) -> Vec<T> {
        crate::tensor::softmax_values(self.raw.values(), None).expect("three unmasked entries")
    }
}

impl<T: Real> Default for MixWeights<T> {
    fn default() -> Self {
        MixWeights::new([T::zero(); REP_LAYERS], T::one())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    /// `3·2H`: the blocks score `h_i`, `h_j`, and `h_i ⊙ h_j`.
    pub weight: Tensor<T>,
    pub window: Window,
}

impl<T: Real> AttentionParams<T> {
    pub fn init(state_dim: usize, window: Window, rng: &mut impl Rng) -> Self {
        AttentionParams {
            weight: glorot(3 * state_dim, 1, vec![3 * state_dim], rng),
            window,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.weight.len() / 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub embeddings: EmbeddingTable<T>,
    pub mix: Option<MixWeights<T>>,
    pub lstm: BiLstmParams<T>,
    pub attention: Option<AttentionParams<T>>,
    pub fusion: Option<BiLstmParams<T>>,
}

impl<T: Real> EncoderParams<T> {
    pub fn init(config: EncoderConfig, embeddings: EmbeddingTable<T>, rng: &mut impl Rng) -> Result<Self> {
        config.window.validate()?;
        if embeddings.dim() != config.word_dim {
            return Err(EncoderError::Config(format!(
                "embedding width {} does not match word_dim {}",
                embeddings.dim(),
                config.word_dim
            )));
        }
        if config.use_elmo && config.rep_dim == 0 {
            return Err(EncoderError::Config("use_elmo requires a positive rep_dim".into()));
        }
        if config.hidden == 0 {
            return Err(EncoderError::Config("hidden size must be positive".into()));
        }
        let h = config.hidden;
        let input_dim = config.word_dim + if config.use_elmo { config.rep_dim } else { 0 };
        let lstm = BiLstmParams::init(input_dim, h, rng);
        let (attention, fusion) = if config.use_attention {
            (
                Some(AttentionParams::init(2 * h, config.window, rng)),
                Some(BiLstmParams::init(4 * h, h, rng)),
            )
        } else {
            (None, None)
        };
        Ok(EncoderParams {
            config,
            embeddings,
            mix: config.use_elmo.then(MixWeights::default),
            lstm,
            attention,
            fusion,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.config.hidden
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("encoder.embeddings".to_string(), self.embeddings.tensor())];
        if let Some(m) = &self.mix {
            out.push(("encoder.mix.raw".into(), &m.raw));
            out.push(("encoder.mix.gamma".into(), &m.gamma));
        }
        push_bilstm(&mut out, "encoder.lstm", &self.lstm);
        if let Some(a) = &self.attention {
            out.push(("encoder.attention.weight".into(), &a.weight));
        }
        if let Some(f) = &self.fusion {
            push_bilstm(&mut out, "encoder.fusion", f);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("encoder.embeddings".to_string(), self.embeddings.tensor_mut())];
        if let Some(m) = &mut self.mix {
            out.push(("encoder.mix.raw".into(), &mut m.raw));
            out.push(("encoder.mix.gamma".into(), &mut m.gamma));
        }
        push_bilstm_mut(&mut out, "encoder.lstm", &mut self.lstm);
        if let Some(a) = &mut self.attention {
            out.push(("encoder.attention.weight".into(), &mut a.weight));
        }
        if let Some(f) = &mut self.fusion {
            push_bilstm_mut(&mut out, "encoder.fusion", f);
        }
        out
    }
}

fn push_bilstm<'p, T>(out: &mut Vec<(String, &'p Tensor<T>)>, prefix: &str, p: &'p BiLstmParams<T>) {
    for (dir, l) in [("fw", &p.forward), ("bw", &p.backward)] {
        out.push((format!("{prefix}.{dir}.w_ih"), &l.w_ih));
        out.push((format!("{prefix}.{dir}.w_hh"), &l.w_hh));
        out.push((format!("{prefix}.{dir}.bias"), &l.bias));
    }
}

fn push_bilstm_mut<'p, T>(out: &mut Vec<(String, &'p mut Tensor<T>)>, prefix: &str, p: &'p mut BiLstmParams<T>) {
    for (dir, l) in [("fw", &mut p.forward), ("bw", &mut p.backward)] {
        out.push((format!("{prefix}.{dir}.w_ih"), &mut l.w_ih));
        out.push((format!("{prefix}.{dir}.w_hh"), &mut l.w_hh));
        out.push((format!("{prefix}.{dir}.bias"), &mut l.bias));
    }
}

/// Row layout of a padded batch: `lengths.len()` sentences of `t_max` rows each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub lengths: Vec<usize>,
    pub t_max: usize,
}

impl Layout {
    pub fn single(len: usize) -> Self {
        Layout {
            lengths: vec![len],
            t_max: len,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.lengths.len() * self.t_max
    }

    /// Maps each row to its mirror within the sentence; padding maps to itself.
    fn reversal(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.rows());
        for (b, &n) in self.lengths.iter().enumerate() {
            for t in 0..self.t_max {
                let src = if t < n { n - 1 - t } else { t };
                idx.push(b * self.t_max + src);
            }
        }
        idx
    }
}

/// One LSTM direction over `(B·T)×D_in` rows, reading each sentence left to right.
fn lstm_pass<'a, T: Real>(
    g: &mut Graph<'a, T>,
    x: Var,
    p: &'a LstmParams<T>,
    name: &str,
    layout: &Layout,
) -> Result<Var> {
    let h = p.hidden();
    let b = layout.batch_size();
    let t_max = layout.t_max;
    let w_ih = g.param(format!("{name}.w_ih"), &p.w_ih);
    let w_hh = g.param(format!("{name}.w_hh"), &p.w_hh);
    let bias = g.param(format!("{name}.bias"), &p.bias);
    let proj = g.matmul(x, w_ih)?;
    let proj = g.add_bias(proj, bias)?;

    let mut states = Vec::with_capacity(t_max);
    let mut prev: Option<(Var, Var)> = None;
    for t in 0..t_max {
        let xt = g.gather_rows(proj, (0..b).map(|i| i * t_max + t).collect())?;
        let gates = match prev {
            Some((h_prev, _)) => {
                let rec = g.matmul(h_prev, w_hh)?;
                g.add(xt, rec)?
            }
            None => xt,
        };
        let parts = g.split_cols(gates, &[h, h, h, h])?;
        let i_gate = g.sigmoid(parts[0])?;
        let f_gate = g.sigmoid(parts[1])?;
        let cand = g.tanh(parts[2])?;
        let o_gate = g.sigmoid(parts[3])?;
        let write = g.mul(i_gate, cand)?;
        let c = match prev {
            Some((_, c_prev)) => {
                let keep = g.mul(f_gate, c_prev)?;
                g.add(keep, write)?
            }
            None => write,
        };
        let c_act = g.tanh(c)?;
        let h_t = g.mul(o_gate, c_act)?;
        states.push(h_t);
        prev = Some((h_t, c));
    }
    let stacked = g.concat_rows(&states)?;
    let order = (0..b).flat_map(|i| (0..t_max).map(move |t| t * b + i)).collect();
    Ok(g.gather_rows(stacked, order)?)
}

/// BiLSTM over padded rows: `(B·T)×D_in → (B·T)×2H`, zero initial states.
pub fn bilstm_graph<'a, T: Real>(
    g: &mut Graph<'a, T>,
    x: Var,
    p: &'a BiLstmParams<T>,
    name: &str,
    layout: &Layout,
) -> Result<Var> {
    let d_in = g.shape(x).get(1).copied().unwrap_or(0);
    if d_in != p.input_dim() || g.shape(x)[0] != layout.rows() {
        return Err(EncoderError::Shape(format!(
            "{name}: input is {:?}, expected {}×{}",
            g.shape(x),
            layout.rows(),
            p.input_dim()
        )));
    }
    let fw = lstm_pass(g, x, &p.forward, &format!("{name}.fw"), layout)?;
    let rev = layout.reversal();
    let x_rev = g.gather_rows(x, rev.clone())?;
    let bw_rev = lstm_pass(g, x_rev, &p.backward, &format!("{name}.bw"), layout)?;
    let bw = g.gather_rows(bw_rev, rev)?;
    Ok(g.concat_cols(&[fw, bw])?)
}

/// `γ · Σ_l softmax(raw)_l · layer_l` over three `(rows)×D_c` inputs.
pub fn mix_graph<'a, T: Real>(g: &mut Graph<'a, T>, layers: &[Var], mix: &'a MixWeights<T>) -> Result<Var> {
    if layers.len() != REP_LAYERS {
        return Err(EncoderError::Shape(format!(
            "expected {REP_LAYERS} representation layers, got {}",
            layers.len()
        )));
    }
    let raw = g.param("encoder.mix.raw", &mix.raw);
    let gamma = g.param("encoder.mix.gamma", &mix.gamma);
    let weights = g.softmax(raw, None)?;
    let mixed = g.weighted_sum(layers, weights)?;
    Ok(g.scale_by(mixed, gamma)?)
}

/// Windowed self-attention over padded rows, as one fused graph op.
///
/// Inputs: `h` `(B·T)×D`, `w` `3D`. Output `a` `(B·T)×D`; padded rows are zero.
/// Saved: dense `B×T×T` attention weights, zero outside each window.
pub struct WindowAttentionOp {
    pub layout: Layout,
    pub window: Window,
}

impl WindowAttentionOp {
    fn alpha<T: Real>(&self, h: &[T], w: &[T], d: usize) -> Vec<T> {
        let t_max = self.layout.t_max;
        let (w_query, w_key, w_prod) = (&w[..d], &w[d..2 * d], &w[2 * d..]);
        let mut alpha = vec![T::zero(); self.layout.batch_size() * t_max * t_max];
        let mut scaled = vec![T::zero(); d];
        for (b, &n) in self.layout.lengths.iter().enumerate() {
            let row = |t: usize| &h[(b * t_max + t) * d..(b * t_max + t + 1) * d];
            let key: Vec<T> = (0..n).map(|j| dot(w_key, row(j))).collect();
            for i in 0..n {
                let hi = row(i);
                let query = dot(w_query, hi);
                for ((s, &wv), &hv) in scaled.iter_mut().zip(w_prod).zip(hi) {
                    *s = wv * hv;
                }
                let (lo, up) = self.window.span(i, n);
                let out = &mut alpha[(b * t_max + i) * t_max..(b * t_max + i + 1) * t_max];
                let mut max = T::neg_infinity();
                for j in lo..=up {
                    out[j] = query + key[j] + dot(&scaled, row(j));
                    max = max.max(out[j]);
                }
                let mut total = T::zero();
                for v in &mut out[lo..=up] {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in &mut out[lo..=up] {
                    *v /= total;
                }
            }
        }
        alpha
    }
}

impl<T: Real> CustomOp<T> for WindowAttentionOp {
    fn name(&self) -> &'static str {
        "window_attention"
    }

    fn forward(&self, inputs: &[OpInput<'_, T>]) -> Result<(Vec<usize>, Vec<T>, Vec<T>), TensorError> {
        let [h, w] = inputs else {
            return Err(TensorError::Invalid {
                op: "window_attention",
                msg: "expected inputs h and w".into(),
            });
        };
        let d = h.shape.get(1).copied().unwrap_or(0);
        if h.shape.len() != 2 || h.shape[0] != self.layout.rows() || w.values.len() != 3 * d {
            return Err(TensorError::ShapeMismatch {
                op: "window_attention",
                left: h.shape.to_vec(),
                right: w.shape.to_vec(),
            });
        }
        let t_max = self.layout.t_max;
        let alpha = self.alpha(h.values, w.values, d);
        let mut out = vec![T::zero(); h.values.len()];
        for (b, &n) in self.layout.lengths.iter().enumerate() {
            for i in 0..n {
                let weights = &alpha[(b * t_max + i) * t_max..(b * t_max + i + 1) * t_max];
                let (lo, up) = self.window.span(i, n);
                let dst = &mut out[(b * t_max + i) * d..(b * t_max + i + 1) * d];
                for (j, &a) in weights.iter().enumerate().take(up + 1).skip(lo) {
                    axpy(a, &h.values[(b * t_max + j) * d..(b * t_max + j + 1) * d], dst);
                }
            }
        }
        Ok((h.shape.to_vec(), out, alpha))
    }

    fn backward(
        &self,
        inputs: &[OpInput<'_, T>],
        _output: &[T],
        alpha: &[T],
        grad_out: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (h, w) = (inputs[0].values, inputs[1].values);
        let d = inputs[0].shape[1];
        let t_max = self.layout.t_max;
        let (w_query, w_key, w_prod) = (&w[..d], &w[d..2 * d], &w[2 * d..]);
        let mut gh = vec![T::zero(); h.len()];
        let mut gw = vec![T::zero(); w.len()];
        let mut d_alpha = vec![T::zero(); t_max];
        let mut mixed_keys = vec![T::zero(); d];
        let mut scaled = vec![T::zero(); d];
        for (b, &n) in self.layout.lengths.iter().enumerate() {
            let off = |t: usize| (b * t_max + t) * d;
            for i in 0..n {
                let hi = &h[off(i)..off(i) + d];
                let ga = &grad_out[off(i)..off(i) + d];
                let weights = &alpha[(b * t_max + i) * t_max..(b * t_max + i + 1) * t_max];
                let (lo, up) = self.window.span(i, n);
                let mut inner = T::zero();
                for j in lo..=up {
                    d_alpha[j] = dot(ga, &h[off(j)..off(j) + d]);
                    inner += weights[j] * d_alpha[j];
                }
                for ((s, &wv), &hv) in scaled.iter_mut().zip(w_prod).zip(hi) {
                    *s = wv * hv;
                }
                mixed_keys.fill(T::zero());
                let mut d_query = T::zero();
                for j in lo..=up {
                    let a = weights[j];
                    let ds = a * (d_alpha[j] - inner);
                    let hj = &h[off(j)..off(j) + d];
                    // value path
                    axpy(a, ga, &mut gh[off(j)..off(j) + d]);
                    // key terms
                    axpy(ds, w_key, &mut gh[off(j)..off(j) + d]);
                    axpy(ds, &scaled, &mut gh[off(j)..off(j) + d]);
                    axpy(ds, hj, &mut gw[d..2 * d]);
                    axpy(ds, hj, &mut mixed_keys);
                    d_query += ds;
                }
                axpy(d_query, w_query, &mut gh[off(i)..off(i) + d]);
                axpy(d_query, hi, &mut gw[..d]);
                for k in 0..d {
                    gh[off(i) + k] += w_prod[k] * mixed_keys[k];
                    gw[2 * d + k] += hi[k] * mixed_keys[k];
                }
            }
        }
        vec![needs_grad[0].then_some(gh), needs_grad[1].then_some(gw)]
    }
}

pub fn attention_graph<'a, T: Real>(g: &mut Graph<'a, T>, h: Var, p: &'a AttentionParams<T>, layout: &Layout) -> Result<Var> {
    let w = g.param("encoder.attention.weight", &p.weight);
    let op = WindowAttentionOp {
        layout: layout.clone(),
        window: p.window.validate()?,
    };
    Ok(g.custom(&[h, w], Box::new(op))?)
}

/// Forward pass of the full encoder on a batch; returns `(B·T_max)×2H` rows.
///
/// With `dropout_rng` set, dropout is applied (training mode).
pub fn encode_graph<'a, T: Real>(
    g: &mut Graph<'a, T>,
    params: &'a EncoderParams<T>,
    batch: &Batch,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let cfg = &params.config;
    let layout = Layout {
        lengths: batch.lengths.clone(),
        t_max: batch.t_max,
    };
    if layout.lengths.contains(&0) || layout.t_max == 0 {
        return Err(EncoderError::Shape("sentences must have at least one token".into()));
    }
    let table = g.param("encoder.embeddings", params.embeddings.tensor());
    if let Some(&bad) = batch.token_ids.iter().find(|&&id| id >= params.embeddings.rows()) {
        return Err(EncoderError::Shape(format!(
            "token id {bad} outside an embedding table of {} rows",
            params.embeddings.rows()
        )));
    }
    let words = g.gather_rows(table, batch.token_ids.clone())?;

    let input = match (&params.mix, cfg.use_elmo) {
        (Some(mix), true) => {
            let reps = batch
                .reps
                .as_ref()
                .ok_or_else(|| EncoderError::Config("use_elmo is set but the batch carries no representations".into()))?;
            let d = batch.rep_dim;
            if d != cfg.rep_dim {
                return Err(EncoderError::Config(format!(
                    "representations are {d}-dimensional, the model expects {}",
                    cfg.rep_dim
                )));
            }
            let rows = layout.rows();
            let mut layers = Vec::with_capacity(REP_LAYERS);
            for l in 0..REP_LAYERS {
                let mut m = Vec::with_capacity(rows * d);
                for b in 0..layout.batch_size() {
                    let start = (b * REP_LAYERS + l) * layout.t_max * d;
                    m.extend(reps[start..start + layout.t_max * d].iter().map(|&v| T::cast(v as f64)));
                }
                layers.push(g.constant(vec![rows, d], m)?);
            }
            let mixed = mix_graph(g, &layers, mix)?;
            g.concat_cols(&[words, mixed])?
        }
        (None, false) => words,
        _ => return Err(EncoderError::Config("mix weights do not match use_elmo".into())),
    };

    let input = match dropout_rng.as_deref_mut() {
        Some(rng) => g.dropout(input, cfg.dropout, rng)?,
        None => input,
    };
    let mut hidden = bilstm_graph(g, input, &params.lstm, "encoder.lstm", &layout)?;
    if let (Some(attn), Some(fusion)) = (&params.attention, &params.fusion) {
        let a = attention_graph(g, hidden, attn, &layout)?;
        let joined = g.concat_cols(&[hidden, a])?;
        hidden = bilstm_graph(g, joined, fusion, "encoder.fusion", &layout)?;
    }
    Ok(match dropout_rng {
        Some(rng) => g.dropout(hidden, cfg.dropout, rng)?,
        None => hidden,
    })
}

/// Encoded batch, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded<T> {
    /// `B×T_max×2H`
    pub hidden: Vec<T>,
    /// `B×T_max`
    pub mask: Vec<bool>,
    pub dim: usize,
    pub t_max: usize,
}

/// Runs the encoder on a batch. `dropout_rng = None` is inference mode.
pub fn encode_sentence<T: Real>(params: &EncoderParams<T>, batch: &Batch, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Encoded<T>> {
    let mut g = Graph::new();
    let out = encode_graph(&mut g, params, batch, dropout_rng)?;
    Ok(Encoded {
        hidden: g.value(out).to_vec(),
        mask: batch.mask.clone(),
        dim: params.output_dim(),
        t_max: batch.t_max,
    })
}

/// Contextual mix for one sentence: `reps` is `3×T×D_c`.
pub fn mix_contextual<T: Real>(reps: &[T], len: usize, dim: usize, layers: usize, mix: &MixWeights<T>) -> Result<Vec<T>> {
    if layers != REP_LAYERS {
        return Err(EncoderError::Shape(format!("expected {REP_LAYERS} layers, got {layers}")));
    }
    if reps.len() != layers * len * dim {
        return Err(EncoderError::Shape(format!(
            "{} values do not form {layers}×{len}×{dim}",
            reps.len()
        )));
    }
    let mut g = Graph::new();
    let vars = reps
        .chunks_exact((len * dim).max(1))
        .map(|c| g.constant(vec![len, dim], c.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = mix_graph(&mut g, &vars, mix)?;
    Ok(g.value(out).to_vec())
}

/// BiLSTM over one `T×D_in` sentence; row `t` is `[forward_t ; backward_t]`.
pub fn bilstm_encode<T: Real>(inputs: &[T], len: usize, params: &BiLstmParams<T>) -> Result<Vec<T>> {
    if len == 0 {
        return Err(EncoderError::Shape("empty sequence".into()));
    }
    if inputs.len() != len * params.input_dim() {
        return Err(EncoderError::Shape(format!(
            "{} input values do not form {len}×{}",
            inputs.len(),
            params.input_dim()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(vec![len, params.input_dim()], inputs.to_vec())?;
    let out = bilstm_graph(&mut g, x, params, "bilstm", &Layout::single(len))?;
    Ok(g.value(out).to_vec())
}

/// Attention vectors `a` (`T×2H`) and weights `α` (`T×T`) for one sentence.
pub fn restricted_attention<T: Real>(h: &[T], len: usize, params: &AttentionParams<T>) -> Result<(Vec<T>, Vec<T>)> {
    params.window.validate()?;
    let d = params.state_dim();
    if len == 0 || h.len() != len * d {
        return Err(EncoderError::Shape(format!("{} values do not form {len}×{d}", h.len())));
    }
    let op = WindowAttentionOp {
        layout: Layout::single(len),
        window: params.window,
    };
    let (_, a, alpha) = op.forward(&[
        OpInput {
            shape: &[len, d],
            values: h,
        },
        OpInput {
            shape: params.weight.shape(),
            values: params.weight.values(),
        },
    ])?;
    Ok((a, alpha))
}

/// Fusion layer: BiLSTM over `[h_t ; a_t]`.
pub fn fuse<T: Real>(h: &[T], a: &[T], len: usize, params: &BiLstmParams<T>) -> Result<Vec<T>> {
    let d = params.input_dim() / 2;
    if h.len() != a.len() || h.len() != len * d || params.input_dim() % 2 != 0 {
        return Err(EncoderError::Shape(format!(
            "fusion expects two {len}×{d} inputs, got {} and {} values",
            h.len(),
            a.len()
        )));
    }
    let joined: Vec<T> = h
        .chunks_exact(d)
        .zip(a.chunks_exact(d))
        .flat_map(|(x, y)| x.iter().chain(y).copied())
        .collect();
    bilstm_encode(&joined, len, params)
}

#[cfg(test)]
mod tests;
