//! Run configuration: built-in defaults, then a JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use eduseg::corpus::CorpusError;
use eduseg::model::ModelError;
use eduseg::persistence::PersistError;
use eduseg::trainer::{TrainConfig, TrainError};

/// Failures mapped onto the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration, or missing inputs (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Anything that goes wrong once the inputs are accepted (exit 1).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Inputs, outputs, and bench settings. Every field is also a config-file key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Files {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub train_reps: Option<PathBuf>,
    pub val_reps: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    pub min_count: Option<usize>,
    pub max_len: Option<usize>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub lines: Option<bool>,
    pub corpus: Option<PathBuf>,
    pub predicted: Option<PathBuf>,
    pub reps: Option<PathBuf>,
    pub batch_sizes: Option<Vec<usize>>,
    pub repetitions: Option<usize>,
    pub bench_json: Option<PathBuf>,
}

/// Training hyperparameters plus file settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub files: Files,
}

impl CliConfig {
    /// Parses a JSON object whose keys are [`TrainConfig`] fields or
    /// [`Files`] fields. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |msg: String| CliError::Usage(format!("config: {msg}"));
        let Value::Object(map) = serde_json::from_str(text).map_err(|e| bad(e.to_string()))? else {
            return Err(bad("expected a JSON object".into()));
        };
        let file_keys = match serde_json::to_value(Files::default()).expect("plain struct") {
            Value::Object(keys) => keys,
            _ => unreachable!("struct serializes to an object"),
        };
        let (files, train): (Map<String, Value>, Map<String, Value>) =
            map.into_iter().partition(|(k, _)| file_keys.contains_key(k));
        Ok(CliConfig {
            train: serde_json::from_value(Value::Object(train)).map_err(|e| bad(e.to_string()))?,
            files: serde_json::from_value(Value::Object(files)).map_err(|e| bad(e.to_string()))?,
        })
    }

    /// Defaults, or defaults overlaid with the file at `path`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(CliConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", p.display())))?;
                CliConfig::from_json(&text)
            }
        }
    }
}

/// Fails with a usage error naming `path` when it is not a readable file.
pub fn require_file<'p>(path: Option<&'p Path>, what: &str, flag: &str) -> Result<&'p Path> {
    let path = path.ok_or_else(|| CliError::Usage(format!("no {what} given (use --{flag})")))?;
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} not found: {}", path.display())));
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use eduseg::encoder::Window;

    use super::*;

    #[test]
    fn empty_object_is_defaults() {
        assert_eq!(CliConfig::from_json("{}").unwrap(), CliConfig::default());
    }

    #[test]
    fn keys_route_to_their_sections() {
        let c = CliConfig::from_json(
            r#"{"hidden": 16, "window": "inf", "use_elmo": false, "train": "a.txt", "batch_sizes": [1, 8]}"#,
        )
        .unwrap();
        assert_eq!(c.train.hidden, 16);
        assert_eq!(c.train.window, Window::Unbounded);
        assert!(!c.train.use_elmo);
        assert_eq!(c.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(c.files.train.as_deref(), Some(Path::new("a.txt")));
        assert_eq!(c.files.batch_sizes, Some(vec![1, 8]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = CliConfig::from_json(r#"{"hiden": 16}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("hiden"), "{err}");
    }

    #[test]
    fn malformed_values_are_usage_errors() {
        for text in ["[]", "{", r#"{"window": 0}"#, r#"{"batch_sizes": "32"}"#] {
            assert_eq!(CliConfig::from_json(text).unwrap_err().exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = require_file(Some(Path::new("/nonexistent/corpus.txt")), "training corpus", "train").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/corpus.txt"));
        assert!(require_file(None, "training corpus", "train").unwrap_err().to_string().contains("--train"));
    }
}
