//! `eduseg`: train, apply, evaluate, and benchmark the discourse segmenter.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eduseg::encoder::Window;
use eduseg::trainer::TrainConfig;

use crate::config::{CliConfig, Files};

#[derive(Parser)]
#[command(name = "eduseg", version, about = "Neural discourse segmenter", args_override_self = true)]
struct Cli {
    /// JSON file of settings; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Label boundaries in a tokenized file.
    Segment(SegmentArgs),
    /// Score a checkpoint (or a predicted corpus) against gold labels.
    Eval(EvalArgs),
    /// Measure decoding throughput across batch sizes.
    Bench(BenchArgs),
    /// Write a generated corpus, word vectors, and representations.
    Synth(commands::SynthArgs),
}

#[derive(Args, Default)]
struct HyperFlags {
    /// Adam step size (default 1e-4).
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Dropout rate (default 0.1).
    #[arg(long)]
    dropout: Option<f64>,
    /// L2 penalty on trainable weights (default 1e-4).
    #[arg(long)]
    l2_weight: Option<f64>,
    /// Global gradient-norm cap (default 5.0).
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Weight-averaging decay (default 0.9999).
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Ramp the averaging decay up over the first updates (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    ema_warmup: Option<bool>,
    /// Attention radius K, or `inf` for the whole sentence (default 5).
    #[arg(long)]
    window: Option<Window>,
    /// LSTM units per direction (default 200).
    #[arg(long)]
    hidden: Option<usize>,
    /// Epoch limit (default 100).
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation F1 gain before stopping (default 10).
    #[arg(long)]
    patience: Option<usize>,
    /// Seed for initialization, shuffling, and dropout (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Mix contextual representations into the input (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    use_elmo: Option<bool>,
    /// Add windowed self-attention and the fusion layer (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    use_attention: Option<bool>,
}

/// Settings shared by every subcommand that runs the model.
#[derive(Args, Default)]
struct RunFlags {
    /// Sentences per batch (default 32).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Threads used for batch-parallel work.
    #[arg(long)]
    workers: Option<usize>,
    /// Longest sentence accepted from corpus files.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    hyper: HyperFlags,
    #[command(flatten)]
    run: RunFlags,
    /// Training corpus.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation corpus used for model selection.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Sentence indices of --train to hold out for validation instead of --val.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Word vectors, one `word v1 .. vD` line each.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Contextual representations aligned with --train.
    #[arg(long)]
    train_reps: Option<PathBuf>,
    /// Contextual representations aligned with --val.
    #[arg(long)]
    val_reps: Option<PathBuf>,
    /// Where the best checkpoint is written.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-epoch metrics, one JSON object per line.
    #[arg(long)]
    metrics_log: Option<PathBuf>,
    /// Tokens seen fewer times in training map to the unknown id.
    #[arg(long)]
    min_count: Option<usize>,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus-format file (label column optional).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Read one whitespace-tokenized sentence per line instead.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    lines: Option<bool>,
    /// Representations aligned with --input.
    #[arg(long)]
    reps: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Gold corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Score this corpus-format file instead of decoding with a checkpoint.
    #[arg(long)]
    predicted: Option<PathBuf>,
    /// Representations aligned with --corpus.
    #[arg(long)]
    reps: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus to decode.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Representations aligned with --corpus.
    #[arg(long)]
    reps: Option<PathBuf>,
    /// Comma-separated batch sizes; 1 is always included.
    #[arg(long, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,
    /// Timed passes per batch size.
    #[arg(long)]
    repetitions: Option<usize>,
    /// Per-repetition samples as JSON.
    #[arg(long)]
    bench_json: Option<PathBuf>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

impl HyperFlags {
    fn apply(self, c: &mut TrainConfig) {
        set(&mut c.learning_rate, self.learning_rate);
        set(&mut c.dropout, self.dropout);
        set(&mut c.l2_weight, self.l2_weight);
        set(&mut c.clip_norm, self.clip_norm);
        set(&mut c.ema_decay, self.ema_decay);
        set(&mut c.ema_warmup, self.ema_warmup);
        set(&mut c.window, self.window);
        set(&mut c.hidden, self.hidden);
        set(&mut c.max_epochs, self.max_epochs);
        set(&mut c.patience, self.patience);
        set(&mut c.seed, self.seed);
        set(&mut c.use_elmo, self.use_elmo);
        set(&mut c.use_attention, self.use_attention);
    }
}

impl RunFlags {
    fn apply(self, c: &mut CliConfig) {
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.train.workers, self.workers);
        set_opt(&mut c.files.max_len, self.max_len);
    }
}

fn merge(config: &mut CliConfig, command: Command) -> config::Result<commands::Action> {
    let f: &mut Files = &mut config.files;
    Ok(match command {
        Command::Train(a) => {
            set_opt(&mut f.train, a.train);
            set_opt(&mut f.val, a.val);
            set_opt(&mut f.split, a.split);
            set_opt(&mut f.embeddings, a.embeddings);
            set_opt(&mut f.train_reps, a.train_reps);
            set_opt(&mut f.val_reps, a.val_reps);
            set_opt(&mut f.checkpoint, a.checkpoint);
            set_opt(&mut f.metrics_log, a.metrics_log);
            set_opt(&mut f.min_count, a.min_count);
            a.hyper.apply(&mut config.train);
            a.run.apply(config);
            commands::Action::Train
        }
        Command::Segment(a) => {
            set_opt(&mut f.checkpoint, a.checkpoint);
            set_opt(&mut f.input, a.input);
            set_opt(&mut f.output, a.output);
            set_opt(&mut f.lines, a.lines);
            set_opt(&mut f.reps, a.reps);
            a.run.apply(config);
            commands::Action::Segment
        }
        Command::Eval(a) => {
            set_opt(&mut f.checkpoint, a.checkpoint);
            set_opt(&mut f.corpus, a.corpus);
            set_opt(&mut f.predicted, a.predicted);
            set_opt(&mut f.reps, a.reps);
            a.run.apply(config);
            commands::Action::Eval
        }
        Command::Bench(a) => {
            set_opt(&mut f.checkpoint, a.checkpoint);
            set_opt(&mut f.corpus, a.corpus);
            set_opt(&mut f.reps, a.reps);
            set_opt(&mut f.batch_sizes, a.batch_sizes);
            set_opt(&mut f.repetitions, a.repetitions);
            set_opt(&mut f.bench_json, a.bench_json);
            a.run.apply(config);
            commands::Action::Bench
        }
        Command::Synth(a) => commands::Action::Synth(a),
    })
}

fn run(cli: Cli) -> config::Result<()> {
    let mut config = CliConfig::load(cli.config.as_deref())?;
    let action = merge(&mut config, cli.command)?;
    config.train.validate()?;
    commands::run(action, &config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eduseg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn merged(config_json: &str, argv: &[&str]) -> CliConfig {
        let mut config = CliConfig::from_json(config_json).unwrap();
        let cli = Cli::try_parse_from(argv).unwrap();
        merge(&mut config, cli.command).unwrap();
        config
    }

    #[test]
    fn flags_override_file_values() {
        let c = merged(
            r#"{"hidden": 16, "learning_rate": 0.5, "train": "file.txt"}"#,
            &["eduseg", "train", "--hidden", "8", "--train", "flag.txt", "--window", "inf"],
        );
        assert_eq!(c.train.hidden, 8);
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.train.window, Window::Unbounded);
        assert_eq!(c.files.train, Some(PathBuf::from("flag.txt")));
    }

    #[test]
    fn boolean_flags() {
        let c = merged(r#"{"use_elmo": false}"#, &["eduseg", "train", "--use-elmo"]);
        assert!(c.train.use_elmo);
        let c = merged("{}", &["eduseg", "train", "--use-elmo=false", "--use-attention", "false"]);
        assert!(!c.train.use_elmo);
        assert!(!c.train.use_attention);
    }

    #[test]
    fn absent_flags_keep_file_values() {
        let c = merged(r#"{"batch_sizes": [1, 4], "workers": 2}"#, &["eduseg", "bench", "--repetitions", "3"]);
        assert_eq!(c.files.batch_sizes, Some(vec![1, 4]));
        assert_eq!(c.files.repetitions, Some(3));
        assert_eq!(c.train.workers, 2);
        let c = merged("{}", &["eduseg", "bench", "--batch-sizes", "1,8,32"]);
        assert_eq!(c.files.batch_sizes, Some(vec![1, 8, 32]));
    }

    #[test]
    fn invalid_window_flag_is_rejected() {
        assert!(Cli::try_parse_from(["eduseg", "train", "--window", "0"]).is_err());
        assert!(Cli::try_parse_from(["eduseg", "train", "--hiden", "3"]).is_err());
    }

    #[test]
    fn command_line_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
