use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{Batch, ContextualReps, Sentence, Vocab};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Textbook LSTM in f64: gates i, f, g, o from `x·W_ih + h·W_hh + b`.
fn reference_lstm(p: &LstmParams<f64>, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let h_dim = p.hidden();
    let d_in = p.input_dim();
    let (wi, wh, bias) = (p.w_ih.values(), p.w_hh.values(), p.bias.values());
    let mut h = vec![0.0; h_dim];
    let mut c = vec![0.0; h_dim];
    let mut out = Vec::new();
    for x in xs {
        let mut z = bias.to_vec();
        for (k, zk) in z.iter_mut().enumerate() {
            for j in 0..d_in {
                *zk += x[j] * wi[j * 4 * h_dim + k];
            }
            for j in 0..h_dim {
                *zk += h[j] * wh[j * 4 * h_dim + k];
            }
        }
        for u in 0..h_dim {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[h_dim + u]);
            let g = z[2 * h_dim + u].tanh();
            let o = sigmoid(z[3 * h_dim + u]);
            c[u] = f * c[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        out.push(h.clone());
    }
    out
}

fn reference_bilstm(p: &BiLstmParams<f64>, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let fw = reference_lstm(&p.forward, xs);
    let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let mut bw = reference_lstm(&p.backward, &rev);
    bw.reverse();
    fw.into_iter().zip(bw).map(|(a, b)| [a, b].concat()).collect()
}

/// Direct evaluation of windowed attention scores, weights, and outputs.
fn reference_attention(h: &[Vec<f64>], w: &[f64], window: Window) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = h.len();
    let d = h[0].len();
    let mut alphas = Vec::new();
    let mut outs = Vec::new();
    for i in 0..n {
        let mut scores = vec![f64::NEG_INFINITY; n];
        for j in 0..n {
            let inside = match window {
                Window::Bounded(k) => i.abs_diff(j) <= k,
                Window::Unbounded => true,
            };
            if inside {
                let mut s = 0.0;
                for k in 0..d {
                    s += w[k] * h[i][k] + w[d + k] * h[j][k] + w[2 * d + k] * h[i][k] * h[j][k];
                }
                scores[j] = s;
            }
        }
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let alpha: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        let mut a = vec![0.0; d];
        for j in 0..n {
            for k in 0..d {
                a[k] += alpha[j] * h[j][k];
            }
        }
        alphas.push(alpha);
        outs.push(a);
    }
    (outs, alphas)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

#[test]
fn mix_selects_single_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reps = rand_vec(&mut rng, 3 * 4 * 5);
    let mix = MixWeights::new([-1e9, 1e9, -1e9], 1.0);
    let out = mix_contextual(&reps, 4, 5, 3, &mix).unwrap();
    assert_eq!(out, reps[20..40].to_vec());

    let mix = MixWeights::new([0.2, 0.1, -0.3], 0.0);
    assert!(mix_contextual(&reps, 4, 5, 3, &mix).unwrap().iter().all(|&v| v == 0.0));
    assert!(matches!(mix_contextual(&reps[..40], 4, 5, 2, &mix), Err(EncoderError::Shape(_))));
}

#[test]
fn mix_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let reps = rand_vec(&mut rng, 3 * 6 * 4);
    let raw = [0.3f64, -0.1, 0.5];
    let z: f64 = raw.iter().map(|r| r.exp()).sum();
    let s: Vec<f64> = raw.iter().map(|r| r.exp() / z).collect();
    let expected: Vec<f64> = (0..24).map(|i| 1.7 * (s[0] * reps[i] + s[1] * reps[24 + i] + s[2] * reps[48 + i])).collect();

    let mix = MixWeights::<f32>::new([0.3, -0.1, 0.5], 1.7);
    let got = mix_contextual(&to_f32(&reps), 6, 4, 3, &mix).unwrap();
    for (a, b) in got.iter().zip(&expected) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
    let total: f32 = mix.normalized().iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn bilstm_single_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = BiLstmParams::<f64>::init(3, 4, &mut rng);
    let x = rand_vec(&mut rng, 3);
    let out = bilstm_encode(&x, 1, &p).unwrap();
    let fw = reference_lstm(&p.forward, &[x.clone()]);
    let bw = reference_lstm(&p.backward, &[x]);
    for (a, b) in out.iter().zip(fw[0].iter().chain(&bw[0])) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn bilstm_reversal_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = BiLstmParams::<f64>::init(3, 2, &mut rng);
    let len = 5;
    let x = rand_vec(&mut rng, len * 3);
    let out = bilstm_encode(&x, len, &p).unwrap();
    let x_rev: Vec<f64> = x.chunks(3).rev().flatten().copied().collect();
    let out_rev = bilstm_encode(&x_rev, len, &p.swapped()).unwrap();
    for t in 0..len {
        let orig = &out[t * 4..t * 4 + 4];
        let mirrored = &out_rev[(len - 1 - t) * 4..(len - t) * 4];
        assert_eq!(&orig[..2], &mirrored[2..]);
        assert_eq!(&orig[2..], &mirrored[..2]);
    }
}

#[test]
fn bilstm_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p64 = BiLstmParams::<f64>::init(4, 3, &mut rng);
    let p32 = BiLstmParams {
        forward: LstmParams {
            w_ih: p64.forward.w_ih.cast(),
            w_hh: p64.forward.w_hh.cast(),
            bias: p64.forward.bias.cast(),
        },
        backward: LstmParams {
            w_ih: p64.backward.w_ih.cast(),
            w_hh: p64.backward.w_hh.cast(),
            bias: p64.backward.bias.cast(),
        },
    };
    let xs: Vec<Vec<f64>> = (0..3).map(|_| to_f32(&rand_vec(&mut rng, 4)).iter().map(|&v| v as f64).collect()).collect();
    let expected = reference_bilstm(&p64, &xs);
    let flat: Vec<f32> = xs.iter().flatten().map(|&v| v as f32).collect();
    let got = bilstm_encode(&flat, 3, &p32).unwrap();
    for (t, row) in expected.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            assert!((got[t * 6 + k] as f64 - v).abs() < 1e-5);
        }
    }
    assert!(matches!(bilstm_encode(&flat[..11], 3, &p32), Err(EncoderError::Shape(_))));
}

#[test]
fn attention_single_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = AttentionParams::<f64>::init(4, Window::Bounded(5), &mut rng);
    let h = rand_vec(&mut rng, 4);
    let (a, alpha) = restricted_attention(&h, 1, &p).unwrap();
    assert_eq!(alpha, vec![1.0]);
    assert_eq!(a, h);
}

#[test]
fn attention_uniform_on_identical_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = AttentionParams::<f64>::init(3, Window::Bounded(1), &mut rng);
    let row = rand_vec(&mut rng, 3);
    let n = 5;
    let h: Vec<f64> = (0..n).flat_map(|_| row.clone()).collect();
    let (a, alpha) = restricted_attention(&h, n, &p).unwrap();
    for i in 0..n {
        let width = if i == 0 || i == n - 1 { 2.0 } else { 3.0 };
        for j in 0..n {
            let expected = if i.abs_diff(j) <= 1 { 1.0 / width } else { 0.0 };
            assert!((alpha[i * n + j] - expected).abs() < 1e-12);
        }
        for k in 0..3 {
            assert!((a[i * 3 + k] - row[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_window_zero_is_rejected() {
    assert!(matches!(Window::bounded(0), Err(EncoderError::Config(_))));
    let p = AttentionParams::<f64> {
        weight: Tensor::zeros(vec![6]),
        window: Window::Bounded(0),
    };
    assert!(matches!(restricted_attention(&[0.0; 4], 2, &p), Err(EncoderError::Config(_))));
}

#[test]
fn attention_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, d) = (7, 4);
    let h = rand_vec(&mut rng, n * d);
    let w = rand_vec(&mut rng, 3 * d);
    let rows: Vec<Vec<f64>> = h.chunks(d).map(<[f64]>::to_vec).collect();
    let (expected_a, expected_alpha) = reference_attention(&rows, &w, Window::Bounded(2));

    let p = AttentionParams {
        weight: Tensor::new(vec![3 * d], to_f32(&w)).unwrap(),
        window: Window::Bounded(2),
    };
    let (a, alpha) = restricted_attention(&to_f32(&h), n, &p).unwrap();
    for i in 0..n {
        let row_sum: f32 = alpha[i * n..(i + 1) * n].iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-6);
        for j in 0..n {
            if i.abs_diff(j) > 2 {
                assert_eq!(alpha[i * n + j], 0.0);
            }
            assert!((alpha[i * n + j] as f64 - expected_alpha[i][j]).abs() < 1e-5);
        }
        for k in 0..d {
            assert!((a[i * d + k] as f64 - expected_a[i][k]).abs() < 1e-5);
        }
    }
}

#[test]
fn wide_window_equals_unbounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, d) = (6, 3);
    let h = rand_vec(&mut rng, n * d);
    let w = Tensor::new(vec![3 * d], rand_vec(&mut rng, 3 * d)).unwrap();
    let unbounded = restricted_attention(
        &h,
        n,
        &AttentionParams {
            weight: w.clone(),
            window: Window::Unbounded,
        },
    )
    .unwrap();
    for k in [n - 1, n, 50] {
        let bounded = restricted_attention(
            &h,
            n,
            &AttentionParams {
                weight: w.clone(),
                window: Window::Bounded(k),
            },
        )
        .unwrap();
        assert_eq!(bounded, unbounded);
    }
}

#[test]
fn fuse_on_zero_input_equals_bias_only_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = BiLstmParams::<f64>::init(8, 2, &mut rng);
    let zeros = vec![0.0; 3 * 4];
    let fused = fuse(&zeros, &zeros, 3, &p).unwrap();
    assert_eq!(fused, bilstm_encode(&[0.0; 24], 3, &p).unwrap());
}

#[test]
fn fuse_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = BiLstmParams::<f64>::init(6, 3, &mut rng);
    let h = rand_vec(&mut rng, 4 * 3);
    let a = rand_vec(&mut rng, 4 * 3);
    let xs: Vec<Vec<f64>> = (0..4).map(|t| [&h[t * 3..t * 3 + 3], &a[t * 3..t * 3 + 3]].concat()).collect();
    let expected = reference_bilstm(&p, &xs);
    let got = fuse(&h, &a, 4, &p).unwrap();
    for (t, row) in expected.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            assert!((got[t * 6 + k] - v).abs() < 1e-12);
        }
    }
    assert!(fuse(&h, &a[..9], 4, &p).is_err());
}

#[test]
fn attention_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let layout = Layout {
        lengths: vec![5, 3],
        t_max: 5,
    };
    let d = 3;
    let h0 = rand_vec(&mut rng, layout.rows() * d);
    let w0 = rand_vec(&mut rng, 3 * d);
    let probe = rand_vec(&mut rng, layout.rows() * d);
    let loss_of = |h: &[f64], w: &[f64], want_grads: bool| {
        let mut g = Graph::<f64>::new();
        let hv = g.variable(vec![layout.rows(), d], h.to_vec()).unwrap();
        let wv = g.variable(vec![3 * d], w.to_vec()).unwrap();
        let op = WindowAttentionOp {
            layout: layout.clone(),
            window: Window::Bounded(1),
        };
        let a = g.custom(&[hv, wv], Box::new(op)).unwrap();
        let p = g.constant(vec![layout.rows(), d], probe.clone()).unwrap();
        let m = g.mul(a, p).unwrap();
        let loss = g.sum(m).unwrap();
        let value = g.value(loss)[0];
        if want_grads {
            g.backward(loss).unwrap();
            (value, g.grad(hv).unwrap().to_vec(), g.grad(wv).unwrap().to_vec())
        } else {
            (value, Vec::new(), Vec::new())
        }
    };
    let (_, gh, gw) = loss_of(&h0, &w0, true);
    let eps = 1e-5;
    let check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = numeric.abs().max(analytic.abs()).max(1e-6);
        assert!((numeric - analytic).abs() / denom < 1e-4, "{analytic} vs {numeric}");
    };
    for i in 0..h0.len() {
        let (mut hp, mut hm) = (h0.clone(), h0.clone());
        hp[i] += eps;
        hm[i] -= eps;
        check(gh[i], loss_of(&hp, &w0, false).0, loss_of(&hm, &w0, false).0);
    }
    for i in 0..w0.len() {
        let (mut wp, mut wm) = (w0.clone(), w0.clone());
        wp[i] += eps;
        wm[i] -= eps;
        check(gw[i], loss_of(&h0, &wp, false).0, loss_of(&h0, &wm, false).0);
    }
    // padded rows receive nothing
    assert!(gh[(5 + 3) * d..].iter().all(|&v| v == 0.0));
}

fn toy_params(use_elmo: bool, use_attention: bool, seed: u64) -> (EncoderParams<f32>, Vocab) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::from_tokens((0..12).map(|i| format!("w{i}")));
    let mut table = Tensor::<f32>::zeros(vec![vocab.len(), 5]);
    for v in table.values_mut()[10..].iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let config = EncoderConfig {
        hidden: 4,
        word_dim: 5,
        rep_dim: 3,
        use_elmo,
        use_attention,
        window: Window::Bounded(2),
        dropout: 0.1,
    };
    let params = EncoderParams::init(config, EmbeddingTable::new(table).unwrap(), &mut rng).unwrap();
    (params, vocab)
}

fn toy_corpus(lengths: &[usize], seed: u64) -> (Vec<Sentence>, ContextualReps) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences: Vec<Sentence> = lengths
        .iter()
        .map(|&n| Sentence::unlabeled((0..n).map(|_| format!("w{}", rng.random_range(0..14))).collect()).unwrap())
        .collect();
    let reps = ContextualReps::new(
        3,
        lengths.iter().map(|&n| (0..3 * n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        lengths.to_vec(),
    )
    .unwrap();
    (sentences, reps)
}

#[test]
fn both_ablation_is_embed_then_bilstm() {
    let (params, vocab) = toy_params(false, false, 13);
    assert!(params.attention.is_none() && params.fusion.is_none() && params.mix.is_none());
    let (sentences, _) = toy_corpus(&[4], 14);
    let batch = Batch::from_indices(&sentences, &vocab, None, &[0]);
    let enc = encode_sentence(&params, &batch, None).unwrap();
    let embedded: Vec<f32> = batch
        .token_ids
        .iter()
        .flat_map(|&id| params.embeddings.row(id).to_vec())
        .collect();
    assert_eq!(enc.hidden, bilstm_encode(&embedded, 4, &params.lstm).unwrap());
}

#[test]
fn padding_invariance_and_determinism() {
    for (elmo, attn) in [(false, false), (true, false), (false, true), (true, true)] {
        let (params, vocab) = toy_params(elmo, attn, 15);
        let (sentences, reps) = toy_corpus(&[3, 7, 1, 5], 16);
        let reps = elmo.then_some(&reps);
        let full = Batch::from_indices(&sentences, &vocab, reps, &[0, 1, 2, 3]);
        let enc = encode_sentence(&params, &full, None).unwrap();
        let again = encode_sentence(&params, &full, None).unwrap();
        assert_eq!(enc, again);
        let d = params.output_dim();
        for (b, s) in sentences.iter().enumerate() {
            let alone = Batch::from_indices(&sentences, &vocab, reps, &[b]);
            let single = encode_sentence(&params, &alone, None).unwrap();
            let rows = &enc.hidden[b * full.t_max * d..(b * full.t_max + s.len()) * d];
            for (x, y) in rows.iter().zip(&single.hidden) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn missing_reps_is_a_configuration_error() {
    let (params, vocab) = toy_params(true, true, 17);
    let (sentences, _) = toy_corpus(&[3], 18);
    let batch = Batch::from_indices(&sentences, &vocab, None, &[0]);
    assert!(matches!(encode_sentence(&params, &batch, None), Err(EncoderError::Config(_))));
}

#[test]
fn seeded_dropout_is_reproducible() {
    let (params, vocab) = toy_params(false, true, 19);
    let (sentences, _) = toy_corpus(&[6, 4], 20);
    let batch = Batch::from_indices(&sentences, &vocab, None, &[0, 1]);
    let a = encode_sentence(&params, &batch, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
    let b = encode_sentence(&params, &batch, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
    let eval = encode_sentence(&params, &batch, None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, eval);
}

#[test]
fn window_parsing() {
    assert_eq!("5".parse::<Window>().unwrap(), Window::Bounded(5));
    assert_eq!("inf".parse::<Window>().unwrap(), Window::Unbounded);
    assert!("0".parse::<Window>().is_err());
    assert_eq!(serde_json::to_string(&Window::Unbounded).unwrap(), "\"inf\"");
    assert_eq!(serde_json::from_str::<Window>("10").unwrap(), Window::Bounded(10));
}
