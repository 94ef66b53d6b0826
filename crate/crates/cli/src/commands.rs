//! Subcommand bodies. Each takes the merged configuration.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use eduseg::corpus::{
    apply_split, build_vocab, format_corpus, load_contextual_reps, load_corpus_with, load_split, load_word_embeddings, parse_corpus, write_corpus,
    write_rep1, write_word_embeddings, ContextualReps, CorpusOptions, LabelColumn, Sentence, DEFAULT_MAX_LEN,
};
use eduseg::evaluator::{score_labels, SegMetrics};
use eduseg::model::Segmenter;
use eduseg::persistence::{load_checkpoint, save_checkpoint, Checkpoint};
use eduseg::synthetic::{connective_corpus, lag_corpus, random_embeddings, random_reps};
use eduseg::trainer::{train, Dataset};

use crate::config::{require_file, CliConfig, CliError, Result};

pub enum Action {
    Train,
    Segment,
    Eval,
    Bench,
    Synth(SynthArgs),
}

pub fn run(action: Action, config: &CliConfig) -> Result<()> {
    match action {
        Action::Train => cmd_train(config),
        Action::Segment => cmd_segment(config),
        Action::Eval => cmd_eval(config),
        Action::Bench => cmd_bench(config),
        Action::Synth(args) => cmd_synth(&args),
    }
}

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn corpus_options(config: &CliConfig, labels: LabelColumn) -> CorpusOptions {
    CorpusOptions {
        max_len: config.files.max_len.unwrap_or(DEFAULT_MAX_LEN),
        labels,
    }
}

/// Loads representations aligned with `corpus`, if a path is given.
fn load_reps(path: Option<&Path>, what: &str, flag: &str, corpus: &[Sentence]) -> Result<Option<ContextualReps>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let p = require_file(Some(p), what, flag)?;
            Ok(Some(load_contextual_reps(p, Some(corpus))?))
        }
    }
}

fn load_model(config: &CliConfig) -> Result<Segmenter<f32>> {
    let path = require_file(config.files.checkpoint.as_deref(), "checkpoint", "checkpoint")?;
    Ok(load_checkpoint(path)?.inference_model())
}

fn cmd_train(config: &CliConfig) -> Result<()> {
    let files = &config.files;
    let tc = config.train;
    let train_path = require_file(files.train.as_deref(), "training corpus", "train")?;
    let emb_path = require_file(files.embeddings.as_deref(), "embeddings file", "embeddings")?;
    let val_path = files.val.as_deref().map(|p| require_file(Some(p), "validation corpus", "val")).transpose()?;
    let ckpt_path = files
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("no checkpoint output path given (use --checkpoint)".into()))?;
    if tc.use_elmo && files.train_reps.is_none() {
        return Err(CliError::Usage(
            "use_elmo is enabled but no contextual representations were given (use --train-reps, or --use-elmo=false)".into(),
        ));
    }
    if tc.use_elmo && val_path.is_some() && files.val_reps.is_none() {
        return Err(CliError::Usage("use_elmo is enabled but --val-reps is missing for the validation corpus".into()));
    }
    let split_path = files.split.as_deref().map(|p| require_file(Some(p), "split file", "split")).transpose()?;
    if split_path.is_some() && (val_path.is_some() || files.val_reps.is_some()) {
        return Err(CliError::Usage("--split carves the validation set out of --train; do not also pass --val or --val-reps".into()));
    }
    let opts = corpus_options(config, LabelColumn::Required);
    let mut train_set = load_corpus_with(train_path, opts)?;
    let mut val_set = match val_path {
        Some(p) => load_corpus_with(p, opts)?,
        None => Vec::new(),
    };
    let (mut train_reps, mut val_reps) = if tc.use_elmo {
        (
            load_reps(files.train_reps.as_deref(), "training representations", "train-reps", &train_set)?,
            load_reps(files.val_reps.as_deref(), "validation representations", "val-reps", &val_set)?,
        )
    } else {
        (None, None)
    };
    if let Some(path) = split_path {
        let (keep, held) = apply_split(train_set.len(), &load_split(path)?)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| train_set[i].clone()).collect::<Vec<_>>();
        (train_set, val_set) = (pick(&keep), pick(&held));
        if let Some(r) = train_reps {
            (train_reps, val_reps) = (Some(r.select(&keep)), Some(r.select(&held)));
        }
    }

    let vocab = build_vocab(&train_set, files.min_count.unwrap_or(1));
    let embeddings = load_word_embeddings(emb_path, &vocab)?;
    let rep_dim = train_reps.as_ref().map_or(0, ContextualReps::dim);
    let encoder = tc.encoder_config(embeddings.dim(), rep_dim);
    let model = Segmenter::init(encoder, vocab, embeddings, &mut ChaCha8Rng::seed_from_u64(tc.seed))?;

    let log_path = files.metrics_log.clone().unwrap_or_else(|| ckpt_path.with_extension("metrics.jsonl"));
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_error(&log_path, e))?);
    let mut log_err = None;
    let outcome = train(
        model,
        &tc,
        Dataset::new(&train_set, train_reps.as_ref()),
        Dataset::new(&val_set, val_reps.as_ref()),
        |m| {
            let line = m.to_json();
            eprintln!("{line}");
            if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                log_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(io_error(&log_path, e));
    }

    save_checkpoint(&Checkpoint::from_snapshot(tc, &outcome.best), &ckpt_path)?;
    let summary = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.history.len(),
        "val": outcome.best_metrics,
        "checkpoint": ckpt_path,
        "metrics_log": log_path,
    });
    println!("{summary}");
    Ok(())
}

/// One whitespace-tokenized sentence per non-blank line.
fn parse_lines(text: &str) -> Result<Vec<Sentence>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(Sentence::unlabeled(l.split_whitespace().map(str::to_string).collect())?))
        .collect()
}

fn cmd_segment(config: &CliConfig) -> Result<()> {
    let files = &config.files;
    let input = require_file(files.input.as_deref(), "input file", "input")?;
    let model = load_model(config)?;
    let text = fs::read_to_string(input).map_err(|e| io_error(input, e))?;
    let sentences = if files.lines.unwrap_or(false) {
        parse_lines(&text)?
    } else {
        parse_corpus(&text, corpus_options(config, LabelColumn::Optional))?
    };

    let output = if sentences.is_empty() {
        String::new()
    } else {
        let reps = load_reps(files.reps.as_deref(), "representations file", "reps", &sentences)?;
        let labels = model.decode_parallel(&sentences, reps.as_ref(), config.train.batch_size, config.train.workers)?;
        let labeled = sentences
            .iter()
            .zip(&labels)
            .map(|(s, l)| s.relabeled(l))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        format_corpus(&labeled)
    };
    match &files.output {
        Some(path) => fs::write(path, output).map_err(|e| io_error(path, e)),
        None => io::stdout().write_all(output.as_bytes()).map_err(|e| io_error(Path::new("<stdout>"), e)),
    }
}

fn cmd_eval(config: &CliConfig) -> Result<()> {
    let files = &config.files;
    let gold_path = require_file(files.corpus.as_deref(), "gold corpus", "corpus")?;
    let opts = corpus_options(config, LabelColumn::Required);
    let gold = load_corpus_with(gold_path, opts)?;

    let predicted = match files.predicted.as_deref() {
        Some(p) => {
            let pred = load_corpus_with(require_file(Some(p), "predicted corpus", "predicted")?, opts)?;
            check_same_tokens(&gold, &pred)?;
            pred.into_iter().map(|s| s.labels().to_vec()).collect()
        }
        None => {
            let model = load_model(config)?;
            let reps = load_reps(files.reps.as_deref(), "representations file", "reps", &gold)?;
            model.decode_parallel(&gold, reps.as_ref(), config.train.batch_size, config.train.workers)?
        }
    };
    let metrics: SegMetrics = score_labels(gold.iter().map(Sentence::labels).zip(predicted.iter().map(Vec::as_slice)));
    println!("{}", metrics.to_json());
    eprintln!("{metrics}");
    Ok(())
}

fn check_same_tokens(gold: &[Sentence], pred: &[Sentence]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(CliError::Runtime(format!(
            "alignment error: gold has {} sentences, predictions have {}",
            gold.len(),
            pred.len()
        )));
    }
    match gold.iter().zip(pred).position(|(g, p)| g.tokens() != p.tokens()) {
        Some(i) => Err(CliError::Runtime(format!("alignment error: sentence {i} has different tokens in the two files"))),
        None => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct BenchRow {
    batch_size: usize,
    median_sents_per_sec: f64,
    speedup: f64,
    sents_per_sec: Vec<f64>,
    seconds: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    sentences: usize,
    workers: usize,
    repetitions: usize,
    rows: Vec<BenchRow>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Index of the first sentence whose labels differ between two decodes.
fn first_mismatch(reference: &[Vec<u8>], other: &[Vec<u8>]) -> Option<usize> {
    (0..reference.len().max(other.len())).find(|&i| reference.get(i) != other.get(i))
}

/// Batch sizes in the given order with 1 first and duplicates dropped.
fn bench_sizes(requested: Option<&[usize]>) -> Result<Vec<usize>> {
    let requested = requested.unwrap_or(&[1, 32]);
    if requested.contains(&0) {
        return Err(CliError::Usage("batch sizes must be positive".into()));
    }
    let mut sizes = vec![1];
    for &b in requested {
        if !sizes.contains(&b) {
            sizes.push(b);
        }
    }
    Ok(sizes)
}

fn cmd_bench(config: &CliConfig) -> Result<()> {
    let files = &config.files;
    let corpus_path = require_file(files.corpus.as_deref(), "corpus", "corpus")?;
    let sizes = bench_sizes(files.batch_sizes.as_deref())?;
    let repetitions = files.repetitions.unwrap_or(5);
    if repetitions == 0 {
        return Err(CliError::Usage("repetitions must be positive".into()));
    }
    let workers = config.train.workers;
    let model = load_model(config)?;
    let sentences = load_corpus_with(corpus_path, corpus_options(config, LabelColumn::Optional))?;
    if sentences.is_empty() {
        return Err(CliError::Usage(format!("{}: corpus is empty", corpus_path.display())));
    }
    let reps = load_reps(files.reps.as_deref(), "representations file", "reps", &sentences)?;
    let reps = reps.as_ref();
    let decode = |b: usize| model.decode_parallel(&sentences, reps, b, workers);

    let reference = decode(1)?;
    for &b in &sizes[1..] {
        let out = decode(b)?;
        if let Some(i) = first_mismatch(&reference, &out) {
            return Err(CliError::Runtime(format!(
                "batch size {b} decodes sentence {i} differently from batch size 1; refusing to report timings"
            )));
        }
    }

    let mut rows: Vec<BenchRow> = Vec::new();
    for &b in &sizes {
        decode(b)?;
        let mut seconds = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            decode(b)?;
            seconds.push(start.elapsed().as_secs_f64());
        }
        let rates: Vec<f64> = seconds.iter().map(|s| sentences.len() as f64 / s).collect();
        let med = median(&rates);
        let base = rows.first().map_or(med, |r| r.median_sents_per_sec);
        rows.push(BenchRow {
            batch_size: b,
            median_sents_per_sec: med,
            speedup: med / base,
            sents_per_sec: rates,
            seconds,
        });
    }

    println!("{:>10}  {:>12}  {:>8}", "batch", "sents/s", "speedup");
    for r in &rows {
        println!("{:>10}  {:>12.2}  {:>7.1}x", r.batch_size, r.median_sents_per_sec, r.speedup);
    }
    if let Some(path) = &files.bench_json {
        let report = BenchReport {
            sentences: sentences.len(),
            workers,
            repetitions,
            rows,
        };
        let json = serde_json::to_string_pretty(&report).expect("plain numbers serialize");
        fs::write(path, json + "\n").map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Boundaries before the connectives "because", "which", "when".
    Connective,
    /// Boundary `lag` tokens after each "mark" token.
    Lag,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory receiving train.txt, val.txt, test.txt, embeddings.txt.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Task::Connective)]
    task: Task,
    /// Boundary offset for the lag task.
    #[arg(long, default_value_t = 4)]
    lag: usize,
    /// Training sentences.
    #[arg(long, default_value_t = 300)]
    train_size: usize,
    /// Validation sentences.
    #[arg(long, default_value_t = 50)]
    val_size: usize,
    /// Test sentences.
    #[arg(long, default_value_t = 50)]
    test_size: usize,
    /// Word vector size.
    #[arg(long, default_value_t = 300)]
    dim: usize,
    /// Also write random contextual representations of this size.
    #[arg(long, default_value_t = 0)]
    rep_dim: usize,
    /// Generator seed; representation files use the following seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let total = args.train_size + args.val_size + args.test_size;
    let corpus = match args.task {
        Task::Connective => connective_corpus(total, args.seed),
        Task::Lag => lag_corpus(total, args.lag, args.seed),
    };
    fs::create_dir_all(&args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;
    let (train_set, rest) = corpus.split_at(args.train_size);
    let (val, test) = rest.split_at(args.val_size);
    let vocab = build_vocab(&corpus, 1);
    let emb_path = args.out_dir.join("embeddings.txt");
    write_word_embeddings(&emb_path, &vocab, &random_embeddings(&vocab, args.dim, args.seed))?;
    println!("{}", emb_path.display());
    for (offset, (name, split)) in [("train", train_set), ("val", val), ("test", test)].into_iter().enumerate() {
        let path = args.out_dir.join(format!("{name}.txt"));
        write_corpus(&path, split)?;
        println!("{}", path.display());
        if args.rep_dim > 0 {
            let path = args.out_dir.join(format!("{name}.rep1"));
            let reps = random_reps(split, args.rep_dim, args.seed.wrapping_add(1 + offset as u64));
            fs::write(&path, write_rep1(&reps)).map_err(|e| io_error(&path, e))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
