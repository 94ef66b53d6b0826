//! Trains on the generated connective corpus with the default settings
//! (word vectors only) and prints per-epoch metrics and the test score.
//!
//! cargo run --release -p eduseg --example synthetic -- [epochs] [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eduseg::corpus::build_vocab;
use eduseg::evaluator::evaluate_corpus;
use eduseg::model::Segmenter;
use eduseg::synthetic::{connective_corpus, random_embeddings};
use eduseg::trainer::{train, Dataset, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(Ok(50), |a| a.parse())?;
    let seed = args.next().map_or(Ok(0), |a| a.parse())?;

    let corpus = connective_corpus(400, seed);
    let (train_set, rest) = corpus.split_at(300);
    let (val, test) = rest.split_at(50);
    let vocab = build_vocab(train_set, 1);
    let table = random_embeddings(&vocab, 300, seed);
    let config = TrainConfig {
        use_elmo: false,
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    };
    let model = Segmenter::init(config.encoder_config(300, 0), vocab, table, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let out = train(model, &config, Dataset::new(train_set, None), Dataset::new(val, None), |m| println!("{}", m.to_json()))?;
    let (metrics, _) = evaluate_corpus(&out.best.averaged(), test, None, 32)?;
    println!("best epoch {}; test {metrics}", out.best_epoch);
    Ok(())
}
