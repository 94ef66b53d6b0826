//! Attention ablation on the lag task: a boundary sits four tokens after
//! each trigger word. Prints mean test F1 with and without attention.
//!
//! cargo run --release -p eduseg --example ablation -- [hidden] [epochs] [lr] [seeds]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eduseg::corpus::build_vocab;
use eduseg::evaluator::evaluate_corpus;
use eduseg::model::Segmenter;
use eduseg::synthetic::{lag_corpus, random_embeddings};
use eduseg::trainer::{train, Dataset, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let hidden: usize = arg(0, "32").parse()?;
    let epochs: usize = arg(1, "10").parse()?;
    let lr: f64 = arg(2, "0.001").parse()?;
    let seeds: u64 = arg(3, "5").parse()?;

    for use_attention in [false, true] {
        let mut scores = Vec::new();
        for seed in 0..seeds {
            let corpus = lag_corpus(400, 4, 100 + seed);
            let (train_set, rest) = corpus.split_at(300);
            let (val, test) = rest.split_at(50);
            let vocab = build_vocab(train_set, 1);
            let table = random_embeddings(&vocab, 50, seed);
            let config = TrainConfig {
                hidden,
                learning_rate: lr,
                max_epochs: epochs,
                use_elmo: false,
                use_attention,
                seed,
                ..TrainConfig::default()
            };
            let model = Segmenter::init(config.encoder_config(50, 0), vocab, table, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let out = train(model, &config, Dataset::new(train_set, None), Dataset::new(val, None), |_| {})?;
            let (metrics, _) = evaluate_corpus(&out.best.averaged(), test, None, 32)?;
            scores.push(metrics.f1);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!("attention={use_attention} mean F1 {mean:.4} {scores:.3?}");
    }
    Ok(())
}
