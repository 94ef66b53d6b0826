//! Linear-chain CRF over the two boundary labels.
//!
//! A label sequence `y` scores
//! `start[y₀] + Σₜ emit[t][yₜ] + Σₜ trans[yₜ₋₁][yₜ] + end[y_last]`,
//! and `p(y) = exp(score(y) − log Z)`. Everything runs in log space.

use thiserror::Error;

use crate::tensor::kernels::{self, log_sum_exp};
use crate::tensor::{CustomOp, OpInput, Real, Tensor, TensorError};

/// Label 0 = inside a unit, 1 = starts a new unit.
pub const NUM_LABELS: usize = 2;

/// Longest lattice [`brute_force_distribution`] will enumerate.
pub const BRUTE_FORCE_MAX_LEN: usize = 16;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CrfError {
    #[error("crf shape error: {0}")]
    Shape(String),
    #[error("label {label} at position {position} is outside the label set")]
    InvalidLabel { position: usize, label: u8 },
    #[error("lattice of length {len} exceeds the enumeration guard of {max}")]
    TooLong { len: usize, max: usize },
}

pub type Result<T, E = CrfError> = std::result::Result<T, E>;

/// Emission projection plus transition, start, and end scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams<T> {
    /// `2H×|Y|`
    pub weight: Tensor<T>,
    /// `|Y|`
    pub bias: Tensor<T>,
    /// `|Y|×|Y|`, row = previous label.
    pub transitions: Tensor<T>,
    pub start: Tensor<T>,
    pub end: Tensor<T>,
}

impl<T: Real> CrfParams<T> {
    /// Zero transitions/start/end; `weight` as given.
    pub fn new(weight: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2 || weight.shape()[1] != NUM_LABELS {
            return Err(CrfError::Shape(format!("emission weight must be D×2, got {:?}", weight.shape())));
        }
        Ok(CrfParams {
            weight: weight.with_grad(true),
            bias: Tensor::zeros(vec![NUM_LABELS]).with_grad(true),
            transitions: Tensor::zeros(vec![NUM_LABELS, NUM_LABELS]).with_grad(true),
            start: Tensor::zeros(vec![NUM_LABELS]).with_grad(true),
            end: Tensor::zeros(vec![NUM_LABELS]).with_grad(true),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn potentials(&self) -> Potentials<'_, T> {
        Potentials {
            transitions: self.transitions.values(),
            start: self.start.values(),
            end: self.end.values(),
        }
    }
}

/// Borrowed label-pair scores.
#[derive(Debug, Clone, Copy)]
pub struct Potentials<'p, T> {
    pub transitions: &'p [T],
    pub start: &'p [T],
    pub end: &'p [T],
}

impl<T: Real> Potentials<'_, T> {
    #[inline]
    fn trans(&self, prev: usize, next: usize) -> T {
        self.transitions[prev * NUM_LABELS + next]
    }
}

/// Per-position, per-label emission scores for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeScores<T> {
    emissions: Vec<T>,
}

impl<T: Real> LatticeScores<T> {
    /// `emissions` is `T×|Y|`, row-major.
    pub fn new(emissions: Vec<T>) -> Result<Self> {
        if emissions.is_empty() || emissions.len() % NUM_LABELS != 0 {
            return Err(CrfError::Shape(format!(
                "{} emission values do not form a non-empty T×{NUM_LABELS} matrix",
                emissions.len()
            )));
        }
        Ok(LatticeScores { emissions })
    }

    pub fn len(&self) -> usize {
        self.emissions.len() / NUM_LABELS
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.is_empty()
    }

    #[inline]
    pub fn at(&self, t: usize, label: usize) -> T {
        self.emissions[t * NUM_LABELS + label]
    }

    pub fn values(&self) -> &[T] {
        &self.emissions
    }
}

/// `h̃·W + b` for a `T×D` hidden-state matrix.
pub fn emission_scores<T: Real>(hidden: &[T], len: usize, params: &CrfParams<T>) -> Result<LatticeScores<T>> {
    let d = params.input_dim();
    if len == 0 || hidden.len() != len * d {
        return Err(CrfError::Shape(format!(
            "hidden states hold {} values, expected {len}×{d}",
            hidden.len()
        )));
    }
    let mut e = kernels::matmul(hidden, params.weight.values(), len, d, NUM_LABELS);
    for row in e.chunks_exact_mut(NUM_LABELS) {
        for (v, &b) in row.iter_mut().zip(params.bias.values()) {
            *v += b;
        }
    }
    LatticeScores::new(e)
}

fn check_labels(labels: &[u8], len: usize) -> Result<()> {
    if labels.len() != len {
        return Err(CrfError::Shape(format!("{} labels for a lattice of length {len}", labels.len())));
    }
    if let Some((position, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_LABELS) {
        return Err(CrfError::InvalidLabel { position, label });
    }
    Ok(())
}

/// Unnormalized log score of one label sequence.
pub fn sequence_score<T: Real>(scores: &LatticeScores<T>, pot: Potentials<'_, T>, labels: &[u8]) -> Result<T> {
    check_labels(labels, scores.len())?;
    let y = |t: usize| labels[t] as usize;
    let mut s = pot.start[y(0)] + scores.at(0, y(0));
    for t in 1..labels.len() {
        s += pot.trans(y(t - 1), y(t)) + scores.at(t, y(t));
    }
    Ok(s + pot.end[y(labels.len() - 1)])
}

/// Forward log-messages `α[t][y]` (including the emission at `t`).
fn forward_messages<T: Real>(scores: &LatticeScores<T>, pot: Potentials<'_, T>) -> Vec<[T; NUM_LABELS]> {
    let n = scores.len();
    let mut alpha = Vec::with_capacity(n);
    alpha.push(std::array::from_fn(|y| pot.start[y] + scores.at(0, y)));
    for t in 1..n {
        let prev: [T; NUM_LABELS] = alpha[t - 1];
        alpha.push(std::array::from_fn(|y| {
            let terms: [T; NUM_LABELS] = std::array::from_fn(|p| prev[p] + pot.trans(p, y));
            log_sum_exp(&terms) + scores.at(t, y)
        }));
    }
    alpha
}

/// Backward log-messages `β[t][y]` (excluding the emission at `t`).
fn backward_messages<T: Real>(scores: &LatticeScores<T>, pot: Potentials<'_, T>) -> Vec<[T; NUM_LABELS]> {
    let n = scores.len();
    let mut beta = vec![[T::zero(); NUM_LABELS]; n];
    beta[n - 1] = std::array::from_fn(|y| pot.end[y]);
    for t in (0..n - 1).rev() {
        let next = beta[t + 1];
        beta[t] = std::array::from_fn(|y| {
            let terms: [T; NUM_LABELS] = std::array::from_fn(|q| pot.trans(y, q) + scores.at(t + 1, q) + next[q]);
            log_sum_exp(&terms)
        });
    }
    beta
}

/// `log Σ_y exp(score(y))` by the forward recursion.
pub fn log_partition<T: Real>(scores: &LatticeScores<T>, pot: Potentials<'_, T>) -> T {
    let alpha = forward_messages(scores, pot);
    let last = alpha[alpha.len() - 1];
    let terms: [T; NUM_LABELS] = std::array::from_fn(|y| last[y] + pot.end[y]);
    log_sum_exp(&terms)
}

/// Posterior marginals: `unary[t][y] = p(yₜ = y)` and
/// `pairwise[t-1][a][b] = p(yₜ₋₁ = a, yₜ = b)`.
pub struct Marginals<T> {
    pub log_z: T,
    pub unary: Vec<[T; NUM_LABELS]>,
    pub pairwise: Vec<[[T; NUM_LABELS]; NUM_LABELS]>,
}

pub fn marginals<T: Real>(scores: &LatticeScores<T>, pot: Potentials<'_, T>) -> Marginals<T> {
    let alpha = forward_messages(scores, pot);
    let beta = backward_messages(scores, pot);
    let n = scores.len();
    let last = alpha[n - 1];
    let log_z = log_sum_exp(&std::array::from_fn::<T, NUM_LABELS, _>(|y| last[y] + pot.end[y]));
    let unary = (0..n)
        .map(|t| std::array::from_fn(|y| (alpha[t][y] + beta[t][y] - log_z).exp()))
        .collect();
    let pairwise = (1..n)
        .map(|t| {
            std::array::from_fn(|a| {
                std::array::from_fn(|b| (alpha[t - 1][a] + pot.trans(a, b) + scores.at(t, b) + beta[t][b] - log_z).exp())
            })
        })
        .collect();
    Marginals { log_z, unary, pairwise }
}

/// Negative log-likelihood of `gold`: `log Z − score(gold)`.
pub fn nll<T: Real>(scores: &LatticeScores<T>, pot: Potentials<'_, T>, gold: &[u8]) -> Result<T> {
    let gold_score = sequence_score(scores, pot, gold)?;
    Ok(log_partition(scores, pot) - gold_score)
}

/// Exact best label sequence and its score.
///
/// Among equally scored sequences the one with label 0 at the earliest
/// differing position wins: best completions are computed right to left, then
/// labels are chosen left to right taking the smallest label that attains the
/// maximum.
pub fn viterbi<T: Real>(scores: &LatticeScores<T>, pot: Potentials<'_, T>) -> (Vec<u8>, T) {
    let n = scores.len();
    // best[t][y]: best score of positions t+1.. given yₜ = y (plus end score).
    let mut best = vec![[T::zero(); NUM_LABELS]; n];
    best[n - 1] = std::array::from_fn(|y| pot.end[y]);
    for t in (0..n - 1).rev() {
        let next = best[t + 1];
        best[t] = std::array::from_fn(|y| {
            (0..NUM_LABELS)
                .map(|q| pot.trans(y, q) + scores.at(t + 1, q) + next[q])
                .fold(T::neg_infinity(), T::max)
        });
    }
    let argmax_first = |cands: [T; NUM_LABELS]| -> usize {
        let mut arg = 0;
        for (y, &v) in cands.iter().enumerate().skip(1) {
            if v > cands[arg] {
                arg = y;
            }
        }
        arg
    };
    let mut labels = Vec::with_capacity(n);
    let mut prev = argmax_first(std::array::from_fn(|y| pot.start[y] + scores.at(0, y) + best[0][y]));
    labels.push(prev as u8);
    for t in 1..n {
        let y = argmax_first(std::array::from_fn(|q| pot.trans(prev, q) + scores.at(t, q) + best[t][q]));
        labels.push(y as u8);
        prev = y;
    }
    let score = sequence_score(scores, pot, &labels).expect("decoded labels are valid");
    (labels, score)
}

/// Every label sequence with its probability, by direct enumeration.
/// Sequences are listed in lexicographic order (position 0 most significant).
pub fn brute_force_distribution<T: Real>(scores: &LatticeScores<T>, pot: Potentials<'_, T>) -> Result<Vec<(Vec<u8>, T)>> {
    let n = scores.len();
    if n > BRUTE_FORCE_MAX_LEN {
        return Err(CrfError::TooLong {
            len: n,
            max: BRUTE_FORCE_MAX_LEN,
        });
    }
    let mut all = Vec::with_capacity(1 << n);
    for code in 0..(1usize << n) {
        let labels: Vec<u8> = (0..n).map(|t| ((code >> (n - 1 - t)) & 1) as u8).collect();
        let s = sequence_score(scores, pot, &labels)?;
        all.push((labels, s));
    }
    let max = all.iter().map(|(_, s)| *s).fold(T::neg_infinity(), T::max);
    let total: T = all.iter().map(|(_, s)| (*s - max).exp()).sum();
    Ok(all
        .into_iter()
        .map(|(labels, s)| (labels, (s - max).exp() / total))
        .collect())
}

/// Mean (or scaled) NLL over the sentences of a padded batch, as a graph op.
///
/// Inputs: emissions `(B·T_max)×|Y|`, transitions `|Y|×|Y|`, start `|Y|`, end `|Y|`.
pub struct CrfNllOp {
    pub lengths: Vec<usize>,
    pub t_max: usize,
    pub gold: Vec<Vec<u8>>,
    /// Multiplies the summed NLL (`1/B` for a batch mean).
    pub scale: f64,
}

impl CrfNllOp {
    fn sentence<'v, T: Real>(&self, emissions: &'v [T], b: usize) -> &'v [T] {
        let start = b * self.t_max * NUM_LABELS;
        &emissions[start..start + self.lengths[b] * NUM_LABELS]
    }
}

fn to_tensor_err(e: CrfError) -> TensorError {
    TensorError::Invalid {
        op: "crf_nll",
        msg: e.to_string(),
    }
}

impl<T: Real> CustomOp<T> for CrfNllOp {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn forward(&self, inputs: &[OpInput<'_, T>]) -> Result<(Vec<usize>, Vec<T>, Vec<T>), TensorError> {
        let [em, tr, st, en] = inputs else {
            return Err(TensorError::Invalid {
                op: "crf_nll",
                msg: "expected four inputs".into(),
            });
        };
        let b = self.lengths.len();
        if em.values.len() != b * self.t_max * NUM_LABELS || self.gold.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "crf_nll",
                left: em.shape.to_vec(),
                right: vec![b, self.t_max, NUM_LABELS],
            });
        }
        let pot = Potentials {
            transitions: tr.values,
            start: st.values,
            end: en.values,
        };
        let mut total = T::zero();
        for i in 0..b {
            let lattice = LatticeScores::new(self.sentence(em.values, i).to_vec()).map_err(to_tensor_err)?;
            total += nll(&lattice, pot, &self.gold[i]).map_err(to_tensor_err)?;
        }
        Ok((vec![1], vec![total * T::cast(self.scale)], Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[OpInput<'_, T>],
        _output: &[T],
        _saved: &[T],
        grad_out: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (em, tr, st, en) = (&inputs[0], &inputs[1], &inputs[2], &inputs[3]);
        let pot = Potentials {
            transitions: tr.values,
            start: st.values,
            end: en.values,
        };
        let g = grad_out[0] * T::cast(self.scale);
        let mut d_em = vec![T::zero(); em.values.len()];
        let mut d_tr = vec![T::zero(); NUM_LABELS * NUM_LABELS];
        let mut d_st = vec![T::zero(); NUM_LABELS];
        let mut d_en = vec![T::zero(); NUM_LABELS];
        for b in 0..self.lengths.len() {
            let n = self.lengths[b];
            let lattice = LatticeScores::new(self.sentence(em.values, b).to_vec()).expect("validated in forward");
            let m = marginals(&lattice, pot);
            let gold = &self.gold[b];
            let base = b * self.t_max * NUM_LABELS;
            for t in 0..n {
                for y in 0..NUM_LABELS {
                    let indicator = if gold[t] as usize == y { T::one() } else { T::zero() };
                    d_em[base + t * NUM_LABELS + y] += g * (m.unary[t][y] - indicator);
                }
            }
            for t in 1..n {
                for a in 0..NUM_LABELS {
                    for c in 0..NUM_LABELS {
                        d_tr[a * NUM_LABELS + c] += g * m.pairwise[t - 1][a][c];
                    }
                }
                d_tr[gold[t - 1] as usize * NUM_LABELS + gold[t] as usize] -= g;
            }
            for y in 0..NUM_LABELS {
                d_st[y] += g * m.unary[0][y];
                d_en[y] += g * m.unary[n - 1][y];
            }
            d_st[gold[0] as usize] -= g;
            d_en[gold[n - 1] as usize] -= g;
        }
        [d_em, d_tr, d_st, d_en]
            .into_iter()
            .zip(needs_grad)
            .map(|(d, &need)| need.then_some(d))
            .collect()
    }
}
