//! `slm`: train, decode, evaluate, inspect orderings, dump attention maps.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 data errors (missing
//! files, malformed corpora, bad checkpoints), 4 numeric errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slm_core::config::{ConfigError, RunConfig};
use slm_core::corpus::{bleu, tokenize, Codec, CorpusError, ParallelData, Vocab};
use slm_core::inference::{decode_lines, DecodeError};
use slm_core::model::{attention_csv, load_model, save_model, Model, ModelError};
use slm_core::numerics::{CheckpointError, NumericsError};
use slm_core::ordering::{
    count_orderings, enumerate_orderings, format_trace, reform, sample_uniform_ordering,
    DirectedToken, OrderingError, ReformedSequence, SpiralOrdering,
};
use slm_core::training::{metrics_to_csv, train, TrainError};

#[derive(Parser)]
#[command(name = "slm", version, about = "Spiral sequence generation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args, Default, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training strategy: l2r | slm-random | slm-twostage.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Fraction of steps trained before stage 2 starts.
    #[arg(long)]
    stage_boundary: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Train on this fraction of the training pairs.
    #[arg(long)]
    data_fraction: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    /// Length-penalty exponent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Force decoding to start from this token sequence.
    #[arg(long)]
    start: Option<String>,
    /// Score the forced start with probability one.
    #[arg(long)]
    start_prob_one: bool,
    /// Print the generation order and score with each decoded line.
    #[arg(long)]
    emit_order: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on the configured corpus or synthetic task.
    Train(Common),
    /// Decode source lines from a file with beam search.
    Decode {
        #[command(flatten)]
        common: Common,
        /// UTF-8 text, one tokenized source sentence per line.
        input: PathBuf,
    },
    /// Score the test split (or a candidates file) with corpus BLEU.
    Evaluate(Common),
    /// Count, enumerate, or sample spiral orderings for T tokens.
    Orderings {
        /// Target sentence length T.
        tokens: usize,
        /// Print every valid ordering as a trace.
        #[arg(long)]
        enumerate: bool,
        /// Print N sampled orderings as traces.
        #[arg(long)]
        sample: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Dump start-head attention maps for source lines as CSV.
    AttnDump {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(common) => cmd_train(common),
        Cmd::Decode { common, input } => cmd_decode(common, &input),
        Cmd::Evaluate(common) => cmd_evaluate(common),
        Cmd::Orderings {
            tokens,
            enumerate,
            sample,
            common,
        } => cmd_orderings(tokens, enumerate, sample, common),
        Cmd::AttnDump { common, input } => cmd_attn_dump(common, &input),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 config, 3 data, 4 numeric.
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Ordering(_) => 2,
            CliError::Train(e) => match e {
                TrainError::Config(_) => 2,
                TrainError::NonFinite { .. } => 4,
                TrainError::Numerics(NumericsError::NonFinite { .. }) => 4,
                _ => 3,
            },
            CliError::Model(e) => match e {
                ModelError::Config(_) => 2,
                ModelError::Numerics(NumericsError::NonFinite { .. }) => 4,
                ModelError::Checkpoint(CheckpointError::NonFinite(_)) => 4,
                _ => 3,
            },
            CliError::Decode(e) => match e {
                DecodeError::Config(_) => 2,
                _ => 3,
            },
            CliError::Corpus(_) => 3,
            CliError::Io { .. } => 3,
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// defaults < SLM_SEED < config file < flags
fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    cfg.apply_env()?;
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &common.strategy {
        cfg.set("strategy", v)?;
    }
    if let Some(v) = common.steps {
        cfg.steps = v;
    }
    if let Some(v) = common.stage_boundary {
        cfg.stage_boundary = v;
    }
    if let Some(v) = common.top_k {
        cfg.top_k = v;
    }
    if let Some(v) = common.data_fraction {
        cfg.data_fraction = v;
    }
    if let Some(v) = common.beam {
        cfg.beam = v;
    }
    if let Some(v) = common.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = &common.start {
        cfg.set("start", v)?;
    }
    if common.start_prob_one {
        cfg.start_prob_one = true;
    }
    if common.emit_order {
        cfg.emit_order = true;
    }
    if let Some(v) = common.threads {
        cfg.threads = v;
    }
    if let Some(v) = &common.checkpoint {
        cfg.checkpoint = v.clone();
    }
    if let Some(v) = &common.metrics_out {
        cfg.metrics_out = v.clone();
    }
    Ok(cfg)
}

/// Corpus plus the codec used to train on it. Synthetic tasks use the full
/// task alphabets; file corpora build their vocabularies over every split.
fn corpus_and_codec(cfg: &RunConfig) -> Result<(ParallelData, Codec), CliError> {
    let stop = cfg.stopword_set()?;
    let (data, task_vocabs) = cfg.load_corpus()?;
    let codec = match task_vocabs {
        Some((src_vocab, tgt_vocab)) => Codec::new(src_vocab, tgt_vocab, stop),
        None => Codec::for_corpus(&data, stop),
    };
    Ok((data, codec))
}

fn cmd_train(common: Common) -> Result<(), CliError> {
    let cfg = resolve_config(&common)?;
    let (data, codec) = corpus_and_codec(&cfg)?;
    let model_cfg = cfg.model_config(codec.src_vocab.len(), codec.tgt_vocab.len());
    let mut model: Model<f32> = Model::init(model_cfg, cfg.seed)?;
    let outcome = train(
        &mut model,
        &codec,
        &data,
        &cfg.train_config(),
        &cfg.beam_config(),
    )?;
    write_file(&cfg.metrics_out, &metrics_to_csv(&outcome.metrics))?;
    save_model(&cfg.checkpoint, &model, &codec)?;
    let last_bleu = outcome.metrics.last().map(|r| r.dev_bleu).unwrap_or(0.0);
    println!(
        "trained {} steps (strategy {}), final loss {:.4}, dev BLEU {:.2}",
        cfg.steps, cfg.strategy, outcome.final_loss, last_bleu
    );
    println!(
        "training pairs: {} of {}",
        outcome.used_pairs, outcome.total_pairs
    );
    println!("checkpoint: {}", cfg.checkpoint.display());
    println!("metrics: {}", cfg.metrics_out.display());
    Ok(())
}

/// Resolve forced-start token strings against the checkpoint vocabulary.
fn resolve_forced_start(
    start: &Option<Vec<String>>,
    vocab: &Vocab,
) -> Result<Option<Vec<usize>>, String> {
    match start {
        None => Ok(None),
        Some(tokens) => {
            let mut ids = Vec::with_capacity(tokens.len());
            for t in tokens {
                match vocab.id(t) {
                    Some(id) => ids.push(id),
                    None => return Err(format!("forced start token {t:?} not in vocabulary")),
                }
            }
            Ok(Some(ids))
        }
    }
}

fn trace_with_names(trace: &ReformedSequence<usize>, vocab: &Vocab) -> ReformedSequence<String> {
    ReformedSequence {
        elements: trace
            .elements
            .iter()
            .map(|e| DirectedToken::new(vocab.token(e.token).to_string(), e.direction))
            .collect(),
    }
}

fn cmd_decode(common: Common, input: &Path) -> Result<(), CliError> {
    let cfg = resolve_config(&common)?;
    let (model, codec) = load_model(&cfg.checkpoint)?;
    let lines: Vec<Vec<String>> = read_file(input)?.lines().map(tokenize).collect();
    let mut beam_cfg = cfg.beam_config();
    beam_cfg.max_steps = Some(model.config().max_steps);
    let mut out = String::new();
    match resolve_forced_start(&cfg.start, &codec.tgt_vocab) {
        Err(msg) => {
            // unknown forced token: an error record per line keeps the
            // output aligned with the input
            for _ in &lines {
                out.push_str(&format!("# error: {msg}\n"));
            }
        }
        Ok(forced) => {
            beam_cfg.forced_start = forced;
            for result in decode_lines(&model, &codec, &lines, &beam_cfg, cfg.threads) {
                match result {
                    Ok(res) => {
                        out.push_str(&codec.tgt_vocab.decode(&res.tokens).join(" "));
                        out.push('\n');
                        if cfg.emit_order {
                            let named = trace_with_names(&res.trace, &codec.tgt_vocab);
                            out.push_str(&format!("# order: {}\n", format_trace(&named)));
                            out.push_str(&format!("# score: {:.4}\n", res.score));
                        }
                    }
                    Err(msg) => out.push_str(&format!("# error: {msg}\n")),
                }
            }
        }
    }
    print!("{out}");
    Ok(())
}

fn cmd_evaluate(common: Common) -> Result<(), CliError> {
    let cfg = resolve_config(&common)?;
    let (data, _) = corpus_and_codec(&cfg)?;
    let split = if !data.test.is_empty() {
        &data.test
    } else {
        &data.dev
    };
    if split.is_empty() {
        return Err(CliError::Corpus(CorpusError::BadSpec(
            "no test or dev split to evaluate".into(),
        )));
    }
    let refs: Vec<Vec<String>> = split.iter().map(|p| p.tgt.clone()).collect();
    let cands: Vec<Vec<String>> = match &cfg.candidates {
        Some(path) => read_file(path)?.lines().map(tokenize).collect(),
        None => {
            let (model, codec) = load_model(&cfg.checkpoint)?;
            let mut beam_cfg = cfg.beam_config();
            beam_cfg.max_steps = Some(model.config().max_steps);
            let lines: Vec<Vec<String>> = split.iter().map(|p| p.src.clone()).collect();
            decode_lines(&model, &codec, &lines, &beam_cfg, cfg.threads)
                .into_iter()
                .map(|r| match r {
                    Ok(res) => codec.tgt_vocab.decode(&res.tokens),
                    Err(_) => Vec::new(),
                })
                .collect()
        }
    };
    let corpus_score = bleu(&cands, &refs, 4)? * 100.0;
    let mut report = String::from("index,bleu,cand_len,ref_len\n");
    for (i, (c, r)) in cands.iter().zip(&refs).enumerate() {
        let s = bleu(std::slice::from_ref(c), std::slice::from_ref(r), 4)
            .map(|b| b * 100.0)
            .unwrap_or(0.0);
        report.push_str(&format!("{i},{s:.2},{},{}\n", c.len(), r.len()));
    }
    write_file(&cfg.metrics_out, &report)?;
    println!("BLEU = {corpus_score:.2}");
    println!("report: {}", cfg.metrics_out.display());
    Ok(())
}

fn placeholder_trace(z: &SpiralOrdering) -> String {
    let tokens: Vec<String> = (1..=z.token_count()).map(|i| format!("t{i}")).collect();
    let seq =
        reform(&tokens, z, "[EOL]".to_string(), "[EOR]".to_string()).expect("valid ordering");
    format_trace(&seq)
}

fn cmd_orderings(
    tokens: usize,
    enumerate: bool,
    sample: Option<usize>,
    common: Common,
) -> Result<(), CliError> {
    let cfg = resolve_config(&common)?;
    println!("{}", count_orderings(tokens)?);
    if enumerate {
        for z in enumerate_orderings(tokens)? {
            println!("{}", placeholder_trace(&z));
        }
    }
    if let Some(n) = sample {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..n {
            let z = sample_uniform_ordering(tokens, &mut rng);
            println!("{}", placeholder_trace(&z));
        }
    }
    Ok(())
}

fn cmd_attn_dump(common: Common, input: &Path) -> Result<(), CliError> {
    let cfg = resolve_config(&common)?;
    let (model, codec) = load_model(&cfg.checkpoint)?;
    let lines: Vec<Vec<String>> = read_file(input)?.lines().map(tokenize).collect();
    let mut out = String::from("src_token,tgt_vocab_token,alpha\n");
    for line in &lines {
        if line.is_empty() {
            continue;
        }
        let src_ids = codec.src_vocab.encode(line)?;
        let h = model.encode_eval(&src_ids)?;
        let (_, alpha) = model.start_probs_eval(&h)?;
        let csv = attention_csv(line, &codec.tgt_vocab, &alpha, cfg.attn_threshold);
        out.push_str(csv.split_once('\n').map(|(_, rest)| rest).unwrap_or(""));
    }
    write_file(&cfg.metrics_out, &out)?;
    println!("attention dump: {}", cfg.metrics_out.display());
    Ok(())
}
