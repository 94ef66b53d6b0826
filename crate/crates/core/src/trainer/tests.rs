use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::corpus::build_vocab;
use crate::synthetic::{connective_corpus, random_embeddings};

fn grads_of(entries: &[(&str, Vec<f64>)]) -> Gradients<f64> {
    let mut g = Gradients::new();
    for (name, v) in entries {
        g.insert(*name, v.clone());
    }
    g
}

#[test]
fn clip_examples() {
    let mut g = grads_of(&[("a", vec![3.0, 4.0])]);
    assert_eq!(clip_gradients(&mut g, 5.0), 5.0);
    assert_eq!(g.get("a").unwrap(), &[3.0, 4.0]);
    let mut g = grads_of(&[("a", vec![6.0, 8.0])]);
    clip_gradients(&mut g, 5.0);
    assert_eq!(g.get("a").unwrap(), &[3.0, 4.0]);
}

proptest! {
    #[test]
    fn clip_caps_norm_and_keeps_direction(
        a in prop::collection::vec(-20.0f64..20.0, 1..6),
        b in prop::collection::vec(-20.0f64..20.0, 1..6),
        max in 0.1f64..30.0,
    ) {
        let before = grads_of(&[("a", a), ("b", b)]);
        let mut after = before.clone();
        let norm = clip_gradients(&mut after, max);
        prop_assert!((after.global_norm() - norm.min(max)).abs() < 1e-9);
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for ((_, x), (_, y)) in before.iter().zip(after.iter()) {
            for (u, v) in x.iter().zip(y) {
                dot += u * v;
                na += u * u;
                nb += v * v;
            }
        }
        if na > 0.0 {
            prop_assert!((dot / (na.sqrt() * nb.sqrt()) - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn adam_first_step_closed_form() {
    let mut x = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap().with_grad(true);
    let g = vec![0.3, -4.0, 1e-3];
    let start = x.values().to_vec();
    let mut state = OptimizerState::default();
    adam_step(vec![("x".into(), &mut x)], &grads_of(&[("x", g.clone())]), &mut state, 0.01, 0.0);
    for i in 0..3 {
        let expected = start[i] - 0.01 * g[i] / (g[i].abs() + ADAM_EPSILON);
        assert!((x.values()[i] - expected).abs() < 1e-15);
        assert!((x.values()[i] - (start[i] - 0.01 * g[i].signum())).abs() < 1e-7);
    }
    assert_eq!(state.step, 1);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut x = Tensor::new(vec![2], vec![1.5f64, -0.25]).unwrap().with_grad(true);
    let mut state = OptimizerState::default();
    for _ in 0..3 {
        adam_step(vec![("x".into(), &mut x)], &grads_of(&[("x", vec![0.0, 0.0])]), &mut state, 0.1, 0.0);
    }
    assert_eq!(x.values(), &[1.5, -0.25]);
}

#[test]
fn adam_matches_scalar_trace() {
    // independent scalar Adam on f(x) = x², starting at x = 1
    let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut trace = Vec::new();
    for t in 1..=5 {
        let g = 2.0 * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        trace.push(x);
    }

    let mut p = Tensor::new(vec![1], vec![1.0f64]).unwrap().with_grad(true);
    let mut state = OptimizerState::default();
    for expected in trace {
        let g = grads_of(&[("x", vec![2.0 * p.values()[0]])]);
        adam_step(vec![("x".into(), &mut p)], &g, &mut state, lr, 0.0);
        assert!((p.values()[0] - expected).abs() < 1e-12);
    }
}

#[test]
fn adam_l2_adds_to_gradient() {
    let mut with_l2 = Tensor::new(vec![1], vec![2.0f64]).unwrap().with_grad(true);
    let mut folded = with_l2.clone();
    let (mut s1, mut s2) = (OptimizerState::default(), OptimizerState::default());
    for _ in 0..4 {
        let g = 0.3;
        let theta = with_l2.values()[0];
        adam_step(vec![("x".into(), &mut with_l2)], &grads_of(&[("x", vec![g])]), &mut s1, 0.05, 0.5);
        let folded_g = g + 0.5 * folded.values()[0];
        adam_step(vec![("x".into(), &mut folded)], &grads_of(&[("x", vec![folded_g])]), &mut s2, 0.05, 0.0);
        assert_eq!(with_l2.values(), folded.values(), "from {theta}");
    }
}

#[test]
fn adam_skips_frozen_tensors() {
    let mut frozen = Tensor::new(vec![1], vec![1.0f64]).unwrap();
    let mut state = OptimizerState::default();
    adam_step(vec![("f".into(), &mut frozen)], &grads_of(&[("f", vec![1.0])]), &mut state, 0.1, 0.1);
    assert_eq!(frozen.values(), &[1.0]);
    assert!(state.first.is_empty());
}

fn shadow_only(values: Vec<f64>) -> EmaState<f64> {
    EmaState {
        decay: 0.9,
        updates: 0,
        shadow: [("p".to_string(), values)].into_iter().collect(),
    }
}

#[test]
fn ema_geometric_closed_form() {
    let p = Tensor::new(vec![2], vec![3.0f64, -1.0]).unwrap();
    let s0 = [0.5f64, 2.0];
    let mut ema = shadow_only(s0.to_vec());
    let decay = 0.9;
    for _ in 0..25 {
        ema_update(&mut ema, [("p".to_string(), &p)], decay);
    }
    let dn = decay.powi(25);
    for i in 0..2 {
        let expected = dn * s0[i] + (1.0 - dn) * p.values()[i];
        assert!((ema.shadow["p"][i] - expected).abs() < 1e-12);
    }
    assert_eq!(ema.updates, 25);
}

#[test]
fn ema_zero_decay_copies() {
    let p = Tensor::new(vec![2], vec![3.0f64, -1.0]).unwrap();
    let mut ema = shadow_only(vec![9.0, 9.0]);
    ema_update(&mut ema, [("p".to_string(), &p)], 0.0);
    assert_eq!(ema.shadow["p"], vec![3.0, -1.0]);
}

#[test]
fn ema_matches_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let decay = 0.97;
    let mut ema = shadow_only(vec![0.0; 3]);
    let mut reference = [0.0f64; 3];
    for _ in 0..100 {
        let values: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        for (r, v) in reference.iter_mut().zip(&values) {
            *r = decay * *r + (1.0 - decay) * v;
        }
        let p = Tensor::new(vec![3], values).unwrap();
        ema_update(&mut ema, [("p".to_string(), &p)], decay);
    }
    for (a, b) in ema.shadow["p"].iter().zip(reference) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn warmup_schedule() {
    let mut cfg = TrainConfig::default();
    assert_eq!(effective_decay(&cfg, 0), 0.1);
    assert_eq!(effective_decay(&cfg, 90), 91.0 / 100.0);
    assert_eq!(effective_decay(&cfg, 10_000_000), 0.9999);
    cfg.ema_warmup = false;
    assert_eq!(effective_decay(&cfg, 0), 0.9999);
}

#[test]
fn defaults() {
    let c = TrainConfig::default();
    assert_eq!(
        (c.learning_rate, c.batch_size, c.dropout, c.l2_weight, c.clip_norm, c.ema_decay),
        (1e-4, 32, 0.1, 1e-4, 5.0, 0.9999)
    );
    assert_eq!((c.window, c.hidden, c.max_epochs, c.patience), (Window::Bounded(5), 200, 100, 10));
    let parsed: TrainConfig = serde_json::from_str(r#"{"hidden": 8, "window": "inf"}"#).unwrap();
    assert_eq!((parsed.hidden, parsed.window, parsed.batch_size), (8, Window::Unbounded, 32));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"hiden": 8}"#).is_err());
    assert!(TrainConfig { dropout: 1.0, ..c }.validate().is_err());
}

fn tiny(seed: u64, use_attention: bool) -> (Segmenter<f32>, Vec<Sentence>, TrainConfig) {
    let corpus = connective_corpus(24, seed);
    let vocab = build_vocab(&corpus, 1);
    let table = random_embeddings(&vocab, 6, seed);
    let config = TrainConfig {
        hidden: 4,
        batch_size: 8,
        use_elmo: false,
        use_attention,
        seed,
        ..TrainConfig::default()
    };
    let model = Segmenter::init(config.encoder_config(6, 0), vocab, table, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (model, corpus, config)
}

#[test]
fn frozen_learning_rate_stops_after_patience() {
    let (model, corpus, config) = tiny(1, true);
    let config = TrainConfig {
        learning_rate: 0.0,
        patience: 1,
        l2_weight: 0.0,
        ..config
    };
    let out = train(model, &config, Dataset::new(&corpus[..16], None), Dataset::new(&corpus[16..], None), |_| {}).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn empty_validation_keeps_last_epoch() {
    let (model, corpus, config) = tiny(2, false);
    let config = TrainConfig { max_epochs: 3, ..config };
    let out = train(model, &config, Dataset::new(&corpus, None), Dataset::new(&[], None), |_| {}).unwrap();
    assert_eq!((out.history.len(), out.best_epoch), (3, 3));
    assert_eq!(out.best, out.last);
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let (model, corpus, config) = tiny(3, true);
        let config = TrainConfig { max_epochs: 2, learning_rate: 0.01, ..config };
        train(model, &config, Dataset::new(&corpus[..16], None), Dataset::new(&corpus[16..], None), |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history[0].train_nll.to_bits(), b.history[0].train_nll.to_bits());
    assert_eq!(a.last.model, b.last.model);
}

#[test]
fn small_step_decreases_batch_loss() {
    for trial in 0..10 {
        let (model, corpus, config) = tiny(10 + trial, trial % 2 == 0);
        let config = TrainConfig {
            learning_rate: 1e-5,
            dropout: 0.0,
            ..config
        };
        let batch = Batch::from_indices(&corpus, &model.vocab, None, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let before = model.mean_loss(&batch).unwrap();
        let mut trainer = Trainer::new(config, model).unwrap();
        trainer.step(&batch, None).unwrap();
        assert!(trainer.model.mean_loss(&batch).unwrap() < before, "trial {trial}");
    }
}

#[test]
fn workers_agree_with_single_thread() {
    let (model, corpus, config) = tiny(5, true);
    let batch = Batch::from_indices(&corpus, &model.vocab, None, &[3, 0, 7, 5, 1]);
    let single = Trainer::new(config, model.clone()).unwrap();
    let multi = Trainer::new(TrainConfig { workers: 3, ..config }, model).unwrap();
    let (l1, g1) = single.batch_gradients(&batch, None).unwrap();
    let (l3, g3) = multi.batch_gradients(&batch, None).unwrap();
    assert!((l1 - l3).abs() < 1e-5);
    for ((n1, a), (n3, b)) in g1.iter().zip(g3.iter()) {
        assert_eq!(n1, n3);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn sub_batch_repads_rows() {
    let (model, corpus, _) = tiny(6, false);
    let batch = Batch::from_indices(&corpus, &model.vocab, None, &[0, 1, 2]);
    assert_eq!(sub_batch(&batch, &[2, 0]), Batch::from_indices(&corpus, &model.vocab, None, &[2, 0]));
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let (mut model, corpus, config) = tiny(7, false);
    model.crf.transitions.values_mut()[0] = f32::NAN;
    match train(model, &config, Dataset::new(&corpus, None), Dataset::new(&[], None), |_| {}) {
        Err(TrainError::NonFinite { epoch: 1, batch: 0, loss }) => assert!(loss.is_nan()),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("training should abort"),
    }
}
