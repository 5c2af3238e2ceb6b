//! Pipeline configuration: a flat key=value text file with includes.
//!
//! Lines are `key = value`, one per line. Blank lines and lines starting
//! with `#` are skipped (values may therefore contain `#`). `include =
//! other.cfg` splices another file at that point, resolved relative to
//! the including file; later assignments win, so a task preset can
//! include a base file and override a few keys. Unknown keys are errors.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bm25::Bm25Params;
use crate::corpus::TaskKind;
use crate::decoder::DecodeConfig;
use crate::reinforce::RolloutMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`, got {text:?}")]
    Malformed {
        path: String,
        line: usize,
        text: String,
    },
    #[error("{path}:{line}: unknown key {key:?}")]
    UnknownKey {
        path: String,
        line: usize,
        key: String,
    },
    #[error("{path}:{line}: bad value for {key}: {message}")]
    BadValue {
        path: String,
        line: usize,
        key: String,
        message: String,
    },
    #[error("include cycle through {path}")]
    IncludeCycle { path: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every knob the pipeline reads, with workable defaults for the paths to
/// be filled in per run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub train_queries: PathBuf,
    pub eval_queries: PathBuf,
    /// Extra labeled queries for the few-shot stage; the few-shot stages
    /// fall back to `train_queries` when unset.
    pub fewshot_queries: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub task_kind: TaskKind,
    pub decode: DecodeConfig,
    pub k_titles: usize,
    pub k_contexts: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub prefix_window: usize,
    pub bm25: Bm25Params,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub fewshot_epochs: usize,
    pub fewshot_learning_rate: f64,
    pub rl_zero_epochs: usize,
    pub rl_zero_learning_rate: f64,
    pub rl_few_epochs: usize,
    pub rl_few_learning_rate: f64,
    pub rl_mode: RolloutMode,
    /// How many decoded titles feed each title-reranker training input.
    pub rerank_titles_in: usize,
    /// How many retrieved contexts feed each title-reranker training input.
    pub rerank_contexts_in: usize,
    pub hard_negative_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            train_queries: PathBuf::from("train.jsonl"),
            eval_queries: PathBuf::from("eval.jsonl"),
            fewshot_queries: None,
            out: PathBuf::from("out"),
            seed: 42,
            task_kind: TaskKind::Qa,
            decode: DecodeConfig::default(),
            k_titles: 5,
            k_contexts: 5,
            embed_dim: 16,
            hidden_dim: 32,
            prefix_window: 4,
            bm25: Bm25Params::default(),
            pretrain_epochs: 20,
            pretrain_learning_rate: 0.1,
            fewshot_epochs: 10,
            fewshot_learning_rate: 0.1,
            rl_zero_epochs: 10,
            rl_zero_learning_rate: 0.05,
            rl_few_epochs: 10,
            rl_few_learning_rate: 0.05,
            rl_mode: RolloutMode::Beam,
            rerank_titles_in: 10,
            rerank_contexts_in: 5,
            hard_negative_k: 128,
        }
    }
}

/// Position of an assignment, for error messages.
#[derive(Clone, Copy)]
struct At<'a> {
    path: &'a str,
    line: usize,
}

impl fmt::Display for At<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.path, self.line)
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut config = PipelineConfig::default();
        let mut visited = BTreeSet::new();
        config.load(path, &mut visited)?;
        Ok(config)
    }

    fn load(&mut self, path: &Path, visited: &mut BTreeSet<PathBuf>) -> Result<(), ConfigError> {
        let canonical = path.canonicalize().map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if !visited.insert(canonical) {
            return Err(ConfigError::IncludeCycle {
                path: path.display().to_string(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let shown = path.display().to_string();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = At {
                path: &shown,
                line: i + 1,
            };
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                path: shown.clone(),
                line: at.line,
                text: line.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key == "include" {
                self.load(&dir.join(value), visited)?;
            } else {
                self.assign(key, value, at)?;
            }
        }
        Ok(())
    }

    /// Applies one assignment; command-line overrides reuse this after the
    /// file is loaded. `at` positions errors (use [`At`] lines 0 for CLI).
    fn assign(&mut self, key: &str, value: &str, at: At) -> Result<(), ConfigError> {
        let bad = |message: String| ConfigError::BadValue {
            path: at.path.to_string(),
            line: at.line,
            key: key.to_string(),
            message,
        };
        if value.is_empty() {
            return Err(bad("empty value".to_string()));
        }
        fn parsed<T: std::str::FromStr>(value: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            value.parse().map_err(|e: T::Err| e.to_string())
        }
        match key {
            "corpus" => self.corpus = PathBuf::from(value),
            "train_queries" => self.train_queries = PathBuf::from(value),
            "eval_queries" => self.eval_queries = PathBuf::from(value),
            "fewshot_queries" => self.fewshot_queries = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parsed(value).map_err(bad)?,
            "task_kind" => {
                self.task_kind = TaskKind::parse(value)
                    .ok_or_else(|| bad("expected qa, factcheck, or dialogue".to_string()))?
            }
            "beam_size" => self.decode.beam_size = parsed(value).map_err(bad)?,
            "max_titles_per_beam" => {
                self.decode.max_titles_per_beam = parsed(value).map_err(bad)?
            }
            "max_total_tokens" => self.decode.max_total_tokens = parsed(value).map_err(bad)?,
            "k_titles" => self.k_titles = parsed(value).map_err(bad)?,
            "k_contexts" => self.k_contexts = parsed(value).map_err(bad)?,
            "embed_dim" => self.embed_dim = parsed(value).map_err(bad)?,
            "hidden_dim" => self.hidden_dim = parsed(value).map_err(bad)?,
            "prefix_window" => self.prefix_window = parsed(value).map_err(bad)?,
            "bm25_k1" => self.bm25.k1 = parsed(value).map_err(bad)?,
            "bm25_b" => self.bm25.b = parsed(value).map_err(bad)?,
            "pretrain_epochs" => self.pretrain_epochs = parsed(value).map_err(bad)?,
            "pretrain_learning_rate" => {
                self.pretrain_learning_rate = parsed(value).map_err(bad)?
            }
            "fewshot_epochs" => self.fewshot_epochs = parsed(value).map_err(bad)?,
            "fewshot_learning_rate" => {
                self.fewshot_learning_rate = parsed(value).map_err(bad)?
            }
            "rl_zero_epochs" => self.rl_zero_epochs = parsed(value).map_err(bad)?,
            "rl_zero_learning_rate" => {
                self.rl_zero_learning_rate = parsed(value).map_err(bad)?
            }
            "rl_few_epochs" => self.rl_few_epochs = parsed(value).map_err(bad)?,
            "rl_few_learning_rate" => self.rl_few_learning_rate = parsed(value).map_err(bad)?,
            "rl_mode" => {
                self.rl_mode = match value {
                    "beam" => RolloutMode::Beam,
                    "sample" => RolloutMode::Sample,
                    _ => return Err(bad("expected beam or sample".to_string())),
                }
            }
            "rerank_titles_in" => self.rerank_titles_in = parsed(value).map_err(bad)?,
            "rerank_contexts_in" => self.rerank_contexts_in = parsed(value).map_err(bad)?,
            "hard_negative_k" => self.hard_negative_k = parsed(value).map_err(bad)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    path: at.path.to_string(),
                    line: at.line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// One command-line flag override, applied after any file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.assign(
            key,
            value,
            At {
                path: "<flag>",
                line: 0,
            },
        )
    }

    /// Structural checks that hold regardless of which stages run.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive: [(&str, usize); 8] = [
            ("beam_size", self.decode.beam_size),
            ("max_titles_per_beam", self.decode.max_titles_per_beam),
            ("max_total_tokens", self.decode.max_total_tokens),
            ("k_titles", self.k_titles),
            ("k_contexts", self.k_contexts),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("prefix_window", self.prefix_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be at least 1")));
            }
        }
        let rates = [
            ("pretrain_learning_rate", self.pretrain_learning_rate, self.pretrain_epochs),
            ("fewshot_learning_rate", self.fewshot_learning_rate, self.fewshot_epochs),
            ("rl_zero_learning_rate", self.rl_zero_learning_rate, self.rl_zero_epochs),
            ("rl_few_learning_rate", self.rl_few_learning_rate, self.rl_few_epochs),
        ];
        for (name, rate, epochs) in rates {
            if epochs > 0 && !(rate > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.bm25.k1 >= 0.0) {
            return Err(ConfigError::Invalid("bm25_k1 must be non-negative".to_string()));
        }
        if !(0.0..=1.0).contains(&self.bm25.b) {
            return Err(ConfigError::Invalid("bm25_b must be in [0, 1]".to_string()));
        }
        Ok(())
    }
}
