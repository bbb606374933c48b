//! Direction-branching beam search.
//!
//! A hypothesis owns a segment of real tokens plus completion flags for the
//! two end markers. Each round, every incomplete hypothesis forks on the
//! legal growth directions (left growth is illegal once `[EOL]` is done,
//! right growth once `[EOR]` is done), the decoder scores the next token for
//! each fork, and the pooled candidates are pruned to the beam size by
//! length-penalized score. The first factor of every hypothesis is the
//! starting-token head's probability for its seed token.
//!
//! Completed hypotheses are set aside and compete with survivors at the
//! end; the search stops early when no survivor's optimistic bound can beat
//! the best completed score.

use std::collections::VecDeque;

use thiserror::Error;

use crate::corpus::{Codec, EOL_ID, EOR_ID, PAD_ID};
use crate::model::{Model, ModelError, SharedParams};
use crate::numerics::Tensor;
use crate::ordering::{restore, DirectedToken, Direction, OrderingError, ReformedSequence};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("no eligible start tokens (everything is special or a stop word)")]
    NoEligibleStart,
    #[error("beam config: {0}")]
    Config(String),
    #[error("forced start: {0}")]
    ForcedStart(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything the search needs from a model; the real implementation wraps
/// an encoded source, tests may substitute score tables.
pub trait SequenceScorer {
    fn vocab_size(&self) -> usize;
    /// May this token seed a hypothesis? (excludes specials and stop words)
    fn eligible_start(&self, token: usize) -> bool;
    /// Log of the start head's occurrence probability.
    fn start_logprob(&self, token: usize) -> f64;
    /// Log-probabilities over the vocabulary for the token following
    /// `prefix` (the last prefix element's direction names the side).
    fn step_logprobs(&self, prefix: &[DirectedToken<usize>]) -> Result<Vec<f64>, ModelError>;
    /// Longest trace the scorer supports.
    fn max_steps(&self) -> usize;
}

/// A [`SequenceScorer`] over one encoded source sentence. Holds a shared
/// parameter snapshot so each step scores without copying weights.
pub struct ModelScorer<'a> {
    model: &'a Model<f32>,
    codec: &'a Codec,
    shared: SharedParams<f32>,
    encoded: std::rc::Rc<Tensor<f32>>,
    start_lp: Vec<f64>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(
        model: &'a Model<f32>,
        codec: &'a Codec,
        src_ids: &[usize],
    ) -> Result<Self, ModelError> {
        let shared = model.shared_params();
        let encoded = std::rc::Rc::new(model.encode_eval(src_ids)?);
        let (probs, _) = model.start_probs_eval(&encoded)?;
        let start_lp = probs.iter().map(|&p| p.ln()).collect();
        Ok(ModelScorer {
            model,
            codec,
            shared,
            encoded,
            start_lp,
        })
    }

    pub fn encoded(&self) -> &Tensor<f32> {
        &self.encoded
    }

    pub fn start_logprobs(&self) -> &[f64] {
        &self.start_lp
    }
}

impl SequenceScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().tgt_vocab
    }

    fn eligible_start(&self, token: usize) -> bool {
        self.codec.eligible_start(token)
    }

    fn start_logprob(&self, token: usize) -> f64 {
        self.start_lp[token]
    }

    fn step_logprobs(&self, prefix: &[DirectedToken<usize>]) -> Result<Vec<f64>, ModelError> {
        self.model
            .step_logprobs_shared(&self.shared, &self.encoded, prefix)
    }

    fn max_steps(&self) -> usize {
        self.model.config().max_steps
    }
}

#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam: usize,
    /// Length-penalty exponent.
    pub alpha: f64,
    /// Trace-length budget; `None` defers to the scorer.
    pub max_steps: Option<usize>,
    /// Seed the search with this exact segment instead of the start head's
    /// proposals.
    pub forced_start: Option<Vec<usize>>,
    /// Score the forced start with probability one instead of the head's
    /// estimate.
    pub forced_start_prob_one: bool,
    /// Pin the start to `[EOL]` and disable left growth; reproduces a
    /// conventional left-to-right beam search.
    pub force_l2r: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 5,
            alpha: 0.6,
            max_steps: None,
            forced_start: None,
            forced_start_prob_one: false,
            force_l2r: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam == 0 {
            return Err(DecodeError::Config("beam size must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(DecodeError::Config(format!(
                "length-penalty alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.force_l2r && self.forced_start.is_some() {
            return Err(DecodeError::Config(
                "force_l2r and forced_start are mutually exclusive".into(),
            ));
        }
        Ok(())
    }
}

/// `((5 + |Y|) / 6)^alpha` where `|Y|` counts real tokens only.
pub fn length_penalty(real_tokens: usize, alpha: f64) -> f64 {
    ((5.0 + real_tokens as f64) / 6.0).powf(alpha)
}

pub fn penalized_score(sum_logprob: f64, real_tokens: usize, alpha: f64) -> f64 {
    sum_logprob / length_penalty(real_tokens, alpha)
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Decode-order tuples; the final element's direction is a placeholder
    /// until the next branch decides it.
    pub trace: Vec<DirectedToken<usize>>,
    /// Real tokens in written order (end markers live in the flags).
    pub segment: VecDeque<usize>,
    pub eol_done: bool,
    pub eor_done: bool,
    /// Start factor plus every accepted step log-probability.
    pub sum_logprob: f64,
    pub truncated: bool,
}

impl Hypothesis {
    fn seeded(token: usize, start_logprob: f64) -> Self {
        Hypothesis {
            trace: vec![DirectedToken::new(token, Direction::Right)],
            segment: VecDeque::from([token]),
            eol_done: false,
            eor_done: false,
            sum_logprob: start_logprob,
            truncated: false,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.eol_done && self.eor_done
    }

    pub fn real_len(&self) -> usize {
        self.segment.len()
    }

    pub fn penalized(&self, alpha: f64) -> f64 {
        penalized_score(self.sum_logprob, self.real_len(), alpha)
    }

    /// Grow by one token on `direction`; the end markers flip flags instead
    /// of entering the segment.
    fn extended(&self, direction: Direction, token: usize, logprob: f64) -> Hypothesis {
        let mut next = self.clone();
        next.trace.last_mut().expect("nonempty trace").direction = direction;
        next.trace.push(DirectedToken::new(token, Direction::Right));
        next.sum_logprob += logprob;
        match token {
            EOL_ID => next.eol_done = true,
            EOR_ID => next.eor_done = true,
            _ => match direction {
                Direction::Left => next.segment.push_front(token),
                Direction::Right => next.segment.push_back(token),
            },
        }
        next
    }

    fn legal_directions(&self) -> Vec<Direction> {
        let mut dirs = Vec::with_capacity(2);
        if !self.eol_done {
            dirs.push(Direction::Left);
        }
        if !self.eor_done {
            dirs.push(Direction::Right);
        }
        dirs
    }
}

/// Initial hypotheses: the head's top proposals, a forced segment, or the
/// pinned `[EOL]` start of the L2R mode.
pub fn init_beams<S: SequenceScorer>(
    scorer: &S,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    if cfg.force_l2r {
        let mut h = Hypothesis::seeded(EOL_ID, 0.0);
        h.segment.clear();
        h.eol_done = true;
        return Ok(vec![h]);
    }
    if let Some(tokens) = &cfg.forced_start {
        if tokens.is_empty() {
            return Err(DecodeError::ForcedStart("empty forced segment".into()));
        }
        for &t in tokens {
            if t >= scorer.vocab_size() {
                return Err(DecodeError::ForcedStart(format!(
                    "token id {t} out of vocabulary"
                )));
            }
            if t == PAD_ID || t == EOL_ID || t == EOR_ID {
                return Err(DecodeError::ForcedStart(
                    "forced segment may not contain special tokens".into(),
                ));
            }
        }
        let start_lp = if cfg.forced_start_prob_one {
            0.0
        } else {
            scorer.start_logprob(tokens[0])
        };
        let mut h = Hypothesis::seeded(tokens[0], start_lp);
        for &t in &tokens[1..] {
            // consumed left to right: each previous tuple points Right
            h.trace.last_mut().expect("nonempty").direction = Direction::Right;
            h.trace.push(DirectedToken::new(t, Direction::Right));
            h.segment.push_back(t);
        }
        return Ok(vec![h]);
    }
    let mut ranked: Vec<usize> = (0..scorer.vocab_size())
        .filter(|&t| scorer.eligible_start(t))
        .collect();
    ranked.sort_by(|&a, &b| {
        scorer
            .start_logprob(b)
            .total_cmp(&scorer.start_logprob(a))
            .then(a.cmp(&b))
    });
    ranked.truncate(cfg.beam);
    if ranked.is_empty() {
        return Err(DecodeError::NoEligibleStart);
    }
    Ok(ranked
        .into_iter()
        .map(|t| Hypothesis::seeded(t, scorer.start_logprob(t)))
        .collect())
}

/// One search round: branch every hypothesis on its legal directions, score
/// all continuations, keep the top `beam` by penalized score, and split off
/// the ones that just finished.
pub fn expand_step<S: SequenceScorer>(
    beams: &[Hypothesis],
    scorer: &S,
    cfg: &BeamConfig,
) -> Result<(Vec<Hypothesis>, Vec<Hypothesis>), DecodeError> {
    let mut pool: Vec<Hypothesis> = Vec::new();
    for hyp in beams {
        debug_assert!(!hyp.is_complete());
        for dir in hyp.legal_directions() {
            let mut prefix = hyp.trace.clone();
            prefix.last_mut().expect("nonempty").direction = dir;
            let lps = scorer.step_logprobs(&prefix)?;
            debug_assert_eq!(lps.len(), scorer.vocab_size());
            for (token, &lp) in lps.iter().enumerate() {
                let legal = match token {
                    PAD_ID => false,
                    EOL_ID => dir == Direction::Left,
                    EOR_ID => dir == Direction::Right,
                    _ => true,
                };
                if !legal {
                    continue;
                }
                pool.push(hyp.extended(dir, token, lp));
            }
        }
    }
    pool.sort_by(|a, b| b.penalized(cfg.alpha).total_cmp(&a.penalized(cfg.alpha)));
    pool.truncate(cfg.beam);
    let (completed, survivors) = pool.into_iter().partition(Hypothesis::is_complete);
    Ok((survivors, completed))
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub trace: ReformedSequence<usize>,
    pub sum_logprob: f64,
    pub score: f64,
    pub truncated: bool,
}

fn result_from(hyp: Hypothesis, alpha: f64) -> DecodeResult {
    let score = hyp.penalized(alpha);
    DecodeResult {
        tokens: hyp.segment.iter().copied().collect(),
        trace: ReformedSequence { elements: hyp.trace },
        sum_logprob: hyp.sum_logprob,
        score,
        truncated: hyp.truncated,
    }
}

fn best_by_score(hyps: &[Hypothesis], alpha: f64) -> Option<&Hypothesis> {
    hyps.iter()
        .max_by(|a, b| a.penalized(alpha).total_cmp(&b.penalized(alpha)))
}

/// Best future score a survivor could still reach: the log-probability sum
/// only falls, so divide by the largest length penalty it could ever earn.
fn optimistic_bound(hyp: &Hypothesis, alpha: f64, max_real: usize) -> f64 {
    if hyp.sum_logprob < 0.0 {
        penalized_score(hyp.sum_logprob, max_real.max(hyp.real_len()), alpha)
    } else {
        hyp.penalized(alpha)
    }
}

pub fn decode<S: SequenceScorer>(scorer: &S, cfg: &BeamConfig) -> Result<DecodeResult, DecodeError> {
    let max_steps = cfg
        .max_steps
        .unwrap_or_else(|| scorer.max_steps())
        .min(scorer.max_steps());
    let mut beams = init_beams(scorer, cfg)?;
    if beams[0].trace.len() + 2 > max_steps {
        return Err(DecodeError::ForcedStart(format!(
            "forced segment leaves no room for end markers within {max_steps} steps"
        )));
    }
    let max_real = max_steps.saturating_sub(2);
    let mut completed: Vec<Hypothesis> = Vec::new();
    while !beams.is_empty() && beams[0].trace.len() < max_steps {
        let (survivors, newly_done) = expand_step(&beams, scorer, cfg)?;
        completed.extend(newly_done);
        beams = survivors;
        if let Some(best_done) = best_by_score(&completed, cfg.alpha) {
            let best_possible = beams
                .iter()
                .map(|h| optimistic_bound(h, cfg.alpha, max_real))
                .fold(f64::NEG_INFINITY, f64::max);
            if best_done.penalized(cfg.alpha) >= best_possible {
                beams.clear();
            }
        }
    }
    if let Some(best) = best_by_score(&completed, cfg.alpha) {
        return Ok(result_from(best.clone(), cfg.alpha));
    }
    // budget exhausted with nothing complete
    let mut best = best_by_score(&beams, cfg.alpha)
        .cloned()
        .ok_or(DecodeError::NoEligibleStart)?;
    best.truncated = true;
    Ok(result_from(best, cfg.alpha))
}

/// Greedy direction-branching search, written as its own loop; `decode`
/// with `beam = 1` must agree with this path.
pub fn greedy_decode<S: SequenceScorer>(
    scorer: &S,
    cfg: &BeamConfig,
) -> Result<DecodeResult, DecodeError> {
    let max_steps = cfg
        .max_steps
        .unwrap_or_else(|| scorer.max_steps())
        .min(scorer.max_steps());
    let single = BeamConfig {
        beam: 1,
        ..cfg.clone()
    };
    let mut hyp = init_beams(scorer, &single)?.remove(0);
    while !hyp.is_complete() && hyp.trace.len() < max_steps {
        let mut best: Option<Hypothesis> = None;
        for dir in hyp.legal_directions() {
            let mut prefix = hyp.trace.clone();
            prefix.last_mut().expect("nonempty").direction = dir;
            let lps = scorer.step_logprobs(&prefix)?;
            for (token, &lp) in lps.iter().enumerate() {
                let legal = match token {
                    PAD_ID => false,
                    EOL_ID => dir == Direction::Left,
                    EOR_ID => dir == Direction::Right,
                    _ => true,
                };
                if !legal {
                    continue;
                }
                let cand = hyp.extended(dir, token, lp);
                let better = match &best {
                    None => true,
                    Some(b) => cand.penalized(cfg.alpha) > b.penalized(cfg.alpha),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        hyp = best.expect("at least one legal continuation");
    }
    if !hyp.is_complete() {
        hyp.truncated = true;
    }
    Ok(result_from(hyp, cfg.alpha))
}

/// Sanity used by tests: a finished trace must replay to the segment the
/// hypothesis accumulated.
pub fn trace_matches_segment(result: &DecodeResult) -> Result<bool, OrderingError> {
    let (tokens, _) = restore(&result.trace, &EOL_ID, &EOR_ID)?;
    Ok(tokens == result.tokens)
}

/// Decode tokenized source lines, optionally across threads. Results come
/// back in input order regardless of the thread count; per-line failures
/// become error strings instead of aborting the batch.
pub fn decode_lines(
    model: &Model<f32>,
    codec: &Codec,
    lines: &[Vec<String>],
    cfg: &BeamConfig,
    threads: usize,
) -> Vec<Result<DecodeResult, String>> {
    let one = |line: &Vec<String>| -> Result<DecodeResult, String> {
        let src_ids = codec.src_vocab.encode(line).map_err(|e| e.to_string())?;
        let scorer = ModelScorer::new(model, codec, &src_ids).map_err(|e| e.to_string())?;
        decode(&scorer, cfg).map_err(|e| e.to_string())
    };
    if threads <= 1 || lines.len() <= 1 {
        return lines.iter().map(one).collect();
    }
    let mut results: Vec<Option<Result<DecodeResult, String>>> = vec![None; lines.len()];
    let chunk = lines.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (slot_chunk, line_chunk) in results.chunks_mut(chunk).zip(lines.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, line) in slot_chunk.iter_mut().zip(line_chunk) {
                    *slot = Some(one(line));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("all slots filled")).collect()
}
