//! Run configuration shared by every CLI subcommand.
//!
//! One flat `key = value` text format (`#` comments, unknown keys rejected)
//! covering model size, training knobs, beam search, the synthetic task,
//! and file paths. Precedence: built-in defaults, then the `SLM_SEED`
//! environment variable, then the `--config` file, then command-line flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{
    default_stopwords, generate, load_stopwords, tokenize, CorpusError, Pair, ParallelData,
    TaskKind, TaskSpec, Vocab,
};
use crate::inference::BeamConfig;
use crate::model::ModelConfig;
use crate::numerics::LrSchedule;
use crate::training::{Strategy, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: &'static str,
        value: String,
        reason: String,
    },
    #[error("bad config line {0:?} (expected `key = value`)")]
    BadLine(String),
    #[error("config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Merged view of every knob with a default for each field.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_steps: usize,
    pub dropout: f64,
    // training
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub stage_boundary: f64,
    pub top_k: usize,
    pub strategy: Strategy,
    pub data_fraction: f64,
    pub eval_interval: usize,
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
    // beam search
    pub beam: usize,
    pub alpha: f64,
    pub start: Option<Vec<String>>,
    pub start_prob_one: bool,
    pub emit_order: bool,
    pub force_l2r: bool,
    // synthetic task
    pub task: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub task_seed: u64,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    // paths
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics_out: PathBuf,
    pub stopwords: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    // misc
    pub seed: u64,
    pub threads: usize,
    pub attn_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_steps: 32,
            dropout: 0.3,
            steps: 2000,
            batch_size: 16,
            lr: 9e-5,
            warmup: 1000,
            stage_boundary: 0.9,
            top_k: 3,
            strategy: Strategy::SlmTwoStage,
            data_fraction: 1.0,
            eval_interval: 200,
            clip_norm: None,
            schedule: LrSchedule::InvSqrtDecay,
            beam: 5,
            alpha: 0.6,
            start: None,
            start_prob_one: false,
            emit_order: false,
            force_l2r: false,
            task: TaskKind::Copy,
            vocab_size: 20,
            min_len: 3,
            max_len: 10,
            task_seed: 17,
            train_count: 2000,
            dev_count: 128,
            test_count: 128,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            test_src: None,
            test_tgt: None,
            checkpoint: PathBuf::from("slm-model.slmc"),
            metrics_out: PathBuf::from("metrics.csv"),
            stopwords: None,
            candidates: None,
            seed: 0,
            threads: 1,
            attn_threshold: 0.1,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key,
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "d-model" => self.d_model = parse_as("d-model", value)?,
            "n-heads" => self.n_heads = parse_as("n-heads", value)?,
            "n-layers" => self.n_layers = parse_as("n-layers", value)?,
            "d-ff" => self.d_ff = parse_as("d-ff", value)?,
            "max-steps" => self.max_steps = parse_as("max-steps", value)?,
            "dropout" => self.dropout = parse_as("dropout", value)?,
            "steps" => self.steps = parse_as("steps", value)?,
            "batch-size" => self.batch_size = parse_as("batch-size", value)?,
            "lr" => self.lr = parse_as("lr", value)?,
            "warmup" => self.warmup = parse_as("warmup", value)?,
            "stage-boundary" => self.stage_boundary = parse_as("stage-boundary", value)?,
            "top-k" => self.top_k = parse_as("top-k", value)?,
            "strategy" => {
                self.strategy = value.parse().map_err(|e: String| ConfigError::BadValue {
                    key: "strategy",
                    value: value.to_string(),
                    reason: e,
                })?
            }
            "data-fraction" => self.data_fraction = parse_as("data-fraction", value)?,
            "eval-interval" => self.eval_interval = parse_as("eval-interval", value)?,
            "clip-norm" => {
                self.clip_norm = match value {
                    "none" => None,
                    v => Some(parse_as("clip-norm", v)?),
                }
            }
            "schedule" => {
                self.schedule = match value {
                    "inv-sqrt" => LrSchedule::InvSqrtDecay,
                    "constant" => LrSchedule::Constant,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: "schedule",
                            value: other.to_string(),
                            reason: "expected inv-sqrt or constant".into(),
                        })
                    }
                }
            }
            "beam" => self.beam = parse_as("beam", value)?,
            "alpha" => self.alpha = parse_as("alpha", value)?,
            "start" => {
                let toks = tokenize(value);
                self.start = if toks.is_empty() { None } else { Some(toks) };
            }
            "start-prob-one" => self.start_prob_one = parse_as("start-prob-one", value)?,
            "emit-order" => self.emit_order = parse_as("emit-order", value)?,
            "force-l2r" => self.force_l2r = parse_as("force-l2r", value)?,
            "task" => {
                self.task = value.parse().map_err(|e: String| ConfigError::BadValue {
                    key: "task",
                    value: value.to_string(),
                    reason: e,
                })?
            }
            "vocab-size" => self.vocab_size = parse_as("vocab-size", value)?,
            "min-len" => self.min_len = parse_as("min-len", value)?,
            "max-len" => self.max_len = parse_as("max-len", value)?,
            "task-seed" => self.task_seed = parse_as("task-seed", value)?,
            "train-count" => self.train_count = parse_as("train-count", value)?,
            "dev-count" => self.dev_count = parse_as("dev-count", value)?,
            "test-count" => self.test_count = parse_as("test-count", value)?,
            "train-src" => self.train_src = Some(PathBuf::from(value)),
            "train-tgt" => self.train_tgt = Some(PathBuf::from(value)),
            "dev-src" => self.dev_src = Some(PathBuf::from(value)),
            "dev-tgt" => self.dev_tgt = Some(PathBuf::from(value)),
            "test-src" => self.test_src = Some(PathBuf::from(value)),
            "test-tgt" => self.test_tgt = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "metrics-out" => self.metrics_out = PathBuf::from(value),
            "stopwords" => self.stopwords = Some(PathBuf::from(value)),
            "candidates" => self.candidates = Some(PathBuf::from(value)),
            "seed" => self.seed = parse_as("seed", value)?,
            "threads" => self.threads = parse_as("threads", value)?,
            "attn-threshold" => self.attn_threshold = parse_as("attn-threshold", value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(raw.to_string()))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// `SLM_SEED` seeds the run when neither file nor flag overrides it.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var("SLM_SEED") {
            self.seed = parse_as("seed", &v)?;
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            seed: self.task_seed,
            train_count: self.train_count,
            dev_count: self.dev_count,
            test_count: self.test_count,
        }
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            src_vocab,
            tgt_vocab,
            max_steps: self.max_steps,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup: self.warmup,
            stage_boundary: self.stage_boundary,
            top_k: self.top_k,
            strategy: self.strategy,
            seed: self.seed,
            data_fraction: self.data_fraction,
            eval_interval: self.eval_interval,
            clip_norm: self.clip_norm,
            schedule: self.schedule,
        }
    }

    /// Beam config with the forced-start tokens still unresolved (the CLI
    /// maps them through the checkpoint vocabulary).
    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.beam,
            alpha: self.alpha,
            max_steps: Some(self.max_steps),
            forced_start: None,
            forced_start_prob_one: self.start_prob_one,
            force_l2r: self.force_l2r,
        }
    }

    /// Stop-word set: the configured file, or the bundled English list.
    pub fn stopword_set(&self) -> Result<BTreeSet<String>, ConfigError> {
        match &self.stopwords {
            Some(path) => Ok(load_stopwords(path)?),
            None => Ok(default_stopwords()),
        }
    }

    /// The corpus this run works on: parallel files when configured,
    /// otherwise the synthetic task.
    pub fn load_corpus(&self) -> Result<(ParallelData, Option<(Vocab, Vocab)>), ConfigError> {
        match (&self.train_src, &self.train_tgt) {
            (Some(src), Some(tgt)) => {
                let read_split = |s: &Option<PathBuf>, t: &Option<PathBuf>| -> Result<Vec<Pair>, ConfigError> {
                    match (s, t) {
                        (Some(s), Some(t)) => Ok(read_parallel(s, t)?),
                        _ => Ok(Vec::new()),
                    }
                };
                let data = ParallelData {
                    train: read_parallel(src, tgt)?,
                    dev: read_split(&self.dev_src, &self.dev_tgt)?,
                    test: read_split(&self.test_src, &self.test_tgt)?,
                };
                Ok((data, None))
            }
            (None, None) => {
                let spec = self.task_spec();
                let data = generate(&spec)?;
                let src_vocab = Vocab::from_tokens(spec.source_alphabet());
                let tgt_vocab = Vocab::from_tokens(spec.target_alphabet());
                Ok((data, Some((src_vocab, tgt_vocab))))
            }
            _ => Err(ConfigError::BadValue {
                key: "train-src",
                value: String::new(),
                reason: "train-src and train-tgt must be set together".into(),
            }),
        }
    }
}

fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<Pair>, ConfigError> {
    let read = |p: &Path| -> Result<Vec<Vec<String>>, ConfigError> {
        let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.display().to_string(),
            source,
        })?;
        Ok(text.lines().map(tokenize).collect())
    };
    let (src_lines, tgt_lines) = (read(src)?, read(tgt)?);
    if src_lines.len() != tgt_lines.len() {
        return Err(ConfigError::BadValue {
            key: "train-src",
            value: format!("{} vs {} lines", src_lines.len(), tgt_lines.len()),
            reason: "parallel files must have equal line counts".into(),
        });
    }
    Ok(src_lines
        .into_iter()
        .zip(tgt_lines)
        .map(|(src, tgt)| Pair { src, tgt })
        .collect())
}
