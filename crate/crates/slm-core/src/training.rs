//! Order-sampled teacher forcing and the two-stage training loop.
//!
//! Each instance rewrites a target sentence under a sampled ordering; the
//! decoder input is the reformed prefix and the target at step `t` is the
//! token that attaches on the side named by the step-`t` direction. The
//! loss is the unweighted sum of translation cross-entropy and the start
//! head's binary cross-entropy.
//!
//! Strategies: `l2r` fixes the left-to-right ordering, `slm-random` samples
//! uniformly throughout, `slm-twostage` samples uniformly until the stage
//! boundary and then pins starts to the head's top-k predicted tokens
//! (replicating the pair once per ordering).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{bleu, Codec, CorpusError, Pair, ParallelData, EOL_ID, EOR_ID};
use crate::inference::{decode, BeamConfig, DecodeError, ModelScorer};
use crate::model::{Model, ModelError};
use crate::numerics::{
    clip_grad_norm, AdamConfig, AdamState, LrSchedule, NumericsError, Tape, Tensor, Var,
};
use crate::ordering::{
    is_valid_ordering, reform, sample_constrained_ordering, sample_uniform_ordering,
    DirectedToken, OrderingError, SpiralOrdering,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("non-finite loss in batch {batch}")]
    NonFinite { batch: usize },
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    L2r,
    SlmRandom,
    SlmTwoStage,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::L2r => "l2r",
            Strategy::SlmRandom => "slm-random",
            Strategy::SlmTwoStage => "slm-twostage",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2r" => Ok(Strategy::L2r),
            "slm-random" => Ok(Strategy::SlmRandom),
            "slm-twostage" => Ok(Strategy::SlmTwoStage),
            other => Err(format!(
                "unknown strategy {other:?} (l2r|slm-random|slm-twostage)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Fraction of `steps` trained before stage 2 begins (two-stage only).
    pub stage_boundary: f64,
    pub top_k: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Deterministic subset of the training pairs to use.
    pub data_fraction: f64,
    pub eval_interval: usize,
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 9e-5,
            warmup: 1000,
            stage_boundary: 0.9,
            top_k: 3,
            strategy: Strategy::SlmTwoStage,
            seed: 0,
            data_fraction: 1.0,
            eval_interval: 200,
            clip_norm: None,
            schedule: LrSchedule::InvSqrtDecay,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("steps and batch_size must be positive".into()));
        }
        if !(self.stage_boundary > 0.0 && self.stage_boundary <= 1.0) {
            return Err(TrainError::Config(format!(
                "stage boundary {} must be in (0,1]",
                self.stage_boundary
            )));
        }
        if self.top_k == 0 {
            return Err(TrainError::Config("top_k must be at least 1".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "data fraction {} must be in (0,1]",
                self.data_fraction
            )));
        }
        if self.eval_interval == 0 {
            return Err(TrainError::Config("eval_interval must be positive".into()));
        }
        Ok(())
    }
}

/// First step (1-based) that trains with stage-2 sampling.
pub fn stage2_start_step(cfg: &TrainConfig) -> usize {
    (cfg.stage_boundary * cfg.steps as f64).ceil() as usize
}

/// Deterministic `ceil(fraction * n)`-element subset of `0..n`.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5fb5_e1a3_9c4d_2b07);
    idx.shuffle(&mut rng);
    idx.truncate(keep);
    idx
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn encode_pairs(pairs: &[Pair], codec: &Codec) -> Result<Vec<EncodedPair>, CorpusError> {
    pairs
        .iter()
        .map(|p| {
            Ok(EncodedPair {
                src: codec.src_vocab.encode(&p.src)?,
                tgt: codec.tgt_vocab.encode(&p.tgt)?,
            })
        })
        .collect()
}

/// One teacher-forcing instance: decoder inputs are the reformed tuples
/// except the last, targets are the tokens of the reformed tuples except
/// the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub src: Vec<usize>,
    pub inputs: Vec<DirectedToken<usize>>,
    pub targets: Vec<usize>,
    pub start_labels: Vec<bool>,
}

/// Occurrence labels over the target vocabulary: 1 for tokens of the target
/// sentence that are neither special nor stop words.
pub fn start_labels(tgt_ids: &[usize], codec: &Codec) -> Vec<bool> {
    let mut labels = vec![false; codec.tgt_vocab.len()];
    for &id in tgt_ids {
        if codec.eligible_start(id) {
            labels[id] = true;
        }
    }
    labels
}

pub fn make_training_instance(
    pair: &EncodedPair,
    z: &SpiralOrdering,
    codec: &Codec,
) -> Result<TrainingInstance, TrainError> {
    if !is_valid_ordering(z.positions(), pair.tgt.len()) {
        return Err(TrainError::Ordering(OrderingError::InvalidOrdering {
            positions: z.positions().to_vec(),
            tokens: pair.tgt.len(),
        }));
    }
    let reformed = reform(&pair.tgt, z, EOL_ID, EOR_ID)?;
    let n = reformed.len();
    let inputs = reformed.elements[..n - 1].to_vec();
    let targets: Vec<usize> = reformed.elements[1..].iter().map(|e| e.token).collect();
    Ok(TrainingInstance {
        src: pair.src.clone(),
        inputs,
        targets,
        start_labels: start_labels(&pair.tgt, codec),
    })
}

/// Forward one instance on a bound model; returns (total, translation,
/// start) loss nodes. The total is the plain unweighted sum.
pub fn instance_losses<'t>(
    tape: &'t Tape<f32>,
    bound: &crate::model::BoundModel<'t, f32>,
    instance: &TrainingInstance,
) -> Result<(Var, Var, Var), ModelError> {
    let h = bound.encode(&instance.src)?;
    let logits = bound.decode_forward(&instance.inputs, h)?;
    let translation = tape.cross_entropy_mean(logits, &instance.targets)?;
    let potentials = bound.start_potentials(h)?;
    let (pooled, _) = bound.start_pooled(potentials)?;
    let start = tape.bce_with_logits_mean(pooled, &instance.start_labels)?;
    let total = tape.add(translation, start)?;
    Ok((total, translation, start))
}

/// Stage-1 sampling: uniform over all valid orderings of the pair's target.
pub fn sample_ordering_stage1<R: Rng + ?Sized>(pair: &EncodedPair, rng: &mut R) -> SpiralOrdering {
    sample_uniform_ordering(pair.tgt.len(), rng)
}

/// Stage-2 selection given start-head probabilities: keep the top-k eligible
/// tokens, intersect with the target, pick one occurrence uniformly per
/// survivor, and constrain an ordering to start there. Falls back to one
/// uniform sample when no predicted token occurs in the target.
pub fn stage2_orderings_from_probs<R: Rng + ?Sized>(
    probs: &[f64],
    codec: &Codec,
    pair: &EncodedPair,
    k: usize,
    rng: &mut R,
) -> Result<Vec<SpiralOrdering>, TrainError> {
    let mut ranked: Vec<usize> = (0..probs.len()).filter(|&t| codec.eligible_start(t)).collect();
    ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ranked.truncate(k);
    let tokens = pair.tgt.len();
    let mut out = Vec::new();
    for tok in ranked {
        let occurrences: Vec<usize> = pair
            .tgt
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == tok)
            .map(|(i, _)| i + 1) // extended positions of the occurrences
            .collect();
        if occurrences.is_empty() {
            continue;
        }
        let pos = occurrences[rng.random_range(0..occurrences.len())];
        out.push(sample_constrained_ordering(tokens, pos..=pos, rng)?);
    }
    if out.is_empty() {
        out.push(sample_uniform_ordering(tokens, rng));
    }
    Ok(out)
}

/// Stage-2 sampling against the trained-so-far model.
pub fn sample_orderings_stage2<R: Rng + ?Sized>(
    model: &Model<f32>,
    codec: &Codec,
    pair: &EncodedPair,
    k: usize,
    rng: &mut R,
) -> Result<Vec<SpiralOrdering>, TrainError> {
    let h = model.encode_eval(&pair.src)?;
    let (probs, _) = model.start_probs_eval(&h)?;
    stage2_orderings_from_probs(&probs, codec, pair, k, rng)
}

/// Orderings to train a pair on at this step.
fn orderings_for<R: Rng + ?Sized>(
    strategy: Strategy,
    stage2: bool,
    model: &Model<f32>,
    codec: &Codec,
    pair: &EncodedPair,
    top_k: usize,
    rng: &mut R,
) -> Result<Vec<SpiralOrdering>, TrainError> {
    match strategy {
        Strategy::L2r => Ok(vec![SpiralOrdering::l2r(pair.tgt.len())]),
        Strategy::SlmRandom => Ok(vec![sample_ordering_stage1(pair, rng)]),
        Strategy::SlmTwoStage if !stage2 => Ok(vec![sample_ordering_stage1(pair, rng)]),
        Strategy::SlmTwoStage => sample_orderings_stage2(model, codec, pair, top_k, rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: &'static str,
    pub train_loss: f64,
    pub dev_bleu: f64,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,phase,train_loss,dev_bleu\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.2}\n",
            r.step, r.phase, r.train_loss, r.dev_bleu
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub final_loss: f64,
    pub final_translation_loss: f64,
    pub final_start_loss: f64,
    /// Pairs actually trained on after the data-fraction subset.
    pub used_pairs: usize,
    pub total_pairs: usize,
}

/// Decode every pair's source and score corpus BLEU (×100) against the
/// references. Per-sentence decode failures count as empty candidates.
pub fn dev_bleu(
    model: &Model<f32>,
    codec: &Codec,
    pairs: &[EncodedPair],
    beam: &BeamConfig,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut cands = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let tokens = match ModelScorer::new(model, codec, &pair.src) {
            Ok(scorer) => match decode(&scorer, beam) {
                Ok(result) => result.tokens,
                Err(_) => Vec::new(),
            },
            Err(_) => Vec::new(),
        };
        cands.push(codec.tgt_vocab.decode(&tokens));
        refs.push(codec.tgt_vocab.decode(&pair.tgt));
    }
    Ok(bleu(&cands, &refs, 4)? * 100.0)
}

/// Run the batched training loop. The caller owns checkpoint and CSV
/// serialization; everything here is deterministic in (config, seed).
pub fn train(
    model: &mut Model<f32>,
    codec: &Codec,
    data: &ParallelData,
    cfg: &TrainConfig,
    eval_beam: &BeamConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let train_pairs = encode_pairs(&data.train, codec)?;
    let dev_pairs = encode_pairs(&data.dev, codec)?;
    let subset = subset_indices(train_pairs.len(), cfg.data_fraction, cfg.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0f83_21c6_55d1_ce4f);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd12f_03bb_9a77_0406);
    let mut adam = AdamState::new(AdamConfig {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup,
        schedule: cfg.schedule,
        ..AdamConfig::default()
    });
    let stage2_from = stage2_start_step(cfg);
    let mut metrics = Vec::new();
    let (mut last_total, mut last_ce, mut last_bce) = (0.0f64, 0.0f64, 0.0f64);
    for step in 1..=cfg.steps {
        let stage2 = cfg.strategy == Strategy::SlmTwoStage && step >= stage2_from;
        let phase = match (cfg.strategy, stage2) {
            (Strategy::L2r, _) => "l2r",
            (Strategy::SlmTwoStage, true) => "stage2",
            _ => "stage1",
        };
        let mut instances = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = subset[data_rng.random_range(0..subset.len())];
            let pair = &train_pairs[idx];
            for z in orderings_for(
                cfg.strategy,
                stage2,
                model,
                codec,
                pair,
                cfg.top_k,
                &mut order_rng,
            )? {
                instances.push(make_training_instance(pair, &z, codec)?);
            }
        }
        let batch_result = (|| -> Result<(f64, f64, f64, Vec<(String, Tensor<f32>)>), TrainError> {
            let tape: Tape<f32> = Tape::new();
            let bound = model.bind(&tape, Some(&mut dropout_rng));
            let mut totals = Vec::with_capacity(instances.len());
            let mut ces = Vec::with_capacity(instances.len());
            let mut bces = Vec::with_capacity(instances.len());
            for inst in &instances {
                let (total, ce, bce) = instance_losses(&tape, &bound, inst)?;
                totals.push(total);
                ces.push(ce);
                bces.push(bce);
            }
            let loss = tape.mean_of(&totals)?;
            let ce = tape.mean_of(&ces)?;
            let bce = tape.mean_of(&bces)?;
            tape.backward(loss)?;
            let grads = bound
                .vars()
                .iter()
                .filter_map(|(name, var)| tape.grad(*var).map(|g| (name.clone(), g)))
                .collect();
            Ok((
                tape.value(loss).item() as f64,
                tape.value(ce).item() as f64,
                tape.value(bce).item() as f64,
                grads,
            ))
        })();
        let (loss, ce, bce, grads) = batch_result.map_err(|e| match e {
            TrainError::Numerics(NumericsError::NonFinite { .. })
            | TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. })) => {
                TrainError::NonFinite { batch: step }
            }
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { batch: step });
        }
        for (name, grad) in grads {
            model.params.accumulate_grad(&name, &grad);
        }
        if let Some(max_norm) = cfg.clip_norm {
            clip_grad_norm(&mut model.params, max_norm);
        }
        adam.step(&mut model.params)?;
        (last_total, last_ce, last_bce) = (loss, ce, bce);
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let bleu100 = dev_bleu(model, codec, &dev_pairs, eval_beam)?;
            metrics.push(MetricsRow {
                step,
                phase,
                train_loss: loss,
                dev_bleu: bleu100,
            });
        }
    }
    Ok(TrainOutcome {
        metrics,
        final_loss: last_total,
        final_translation_loss: last_ce,
        final_start_loss: last_bce,
        used_pairs: subset.len(),
        total_pairs: train_pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_stopwords, generate, TaskKind, TaskSpec, Vocab};
    use crate::model::ModelConfig;
    use crate::ordering::{restore, Direction, ReformedSequence};

    fn test_codec() -> Codec {
        // target vocab: ids 3.. are a b c the cat sat
        Codec::new(
            Vocab::from_tokens(["sa", "sb", "sc", "sd", "se"]),
            Vocab::from_tokens(["a", "b", "c", "the", "cat", "sat"]),
            default_stopwords(),
        )
    }

    fn ids(codec: &Codec, toks: &[&str]) -> Vec<usize> {
        toks.iter().map(|t| codec.tgt_vocab.id(t).unwrap()).collect()
    }

    #[test]
    fn l2r_instance_example() {
        let codec = test_codec();
        let pair = EncodedPair {
            src: vec![3, 4],
            tgt: ids(&codec, &["a", "b"]),
        };
        let inst =
            make_training_instance(&pair, &SpiralOrdering::l2r(2), &codec).unwrap();
        let (a, b) = (pair.tgt[0], pair.tgt[1]);
        assert_eq!(
            inst.inputs,
            vec![
                DirectedToken::new(EOL_ID, Direction::Right),
                DirectedToken::new(a, Direction::Right),
                DirectedToken::new(b, Direction::Right),
            ]
        );
        assert_eq!(inst.targets, vec![a, b, EOR_ID]);
    }

    #[test]
    fn interior_start_instance_example() {
        let codec = test_codec();
        let pair = EncodedPair {
            src: vec![3],
            tgt: ids(&codec, &["a", "b", "c"]),
        };
        let z = SpiralOrdering::new(vec![2, 3, 4, 1, 0], 3).unwrap();
        let inst = make_training_instance(&pair, &z, &codec).unwrap();
        let (a, b, c) = (pair.tgt[0], pair.tgt[1], pair.tgt[2]);
        assert_eq!(
            inst.inputs,
            vec![
                DirectedToken::new(b, Direction::Right),
                DirectedToken::new(c, Direction::Right),
                DirectedToken::new(EOR_ID, Direction::Left),
                DirectedToken::new(a, Direction::Left),
            ]
        );
        assert_eq!(inst.targets, vec![c, EOR_ID, a, EOL_ID]);
        // invalid ordering is a precondition error
        let bad = SpiralOrdering::l2r(2);
        assert!(make_training_instance(&pair, &bad, &codec).is_err());
    }

    #[test]
    fn start_label_rule() {
        let codec = test_codec();
        let tgt = ids(&codec, &["the", "cat", "sat"]);
        let labels = start_labels(&tgt, &codec);
        assert!(!labels[codec.tgt_vocab.id("the").unwrap()]); // stop word
        assert!(labels[codec.tgt_vocab.id("cat").unwrap()]);
        assert!(labels[codec.tgt_vocab.id("sat").unwrap()]);
        assert!(!labels[EOL_ID] && !labels[EOR_ID] && !labels[0]);
        assert!(!labels[codec.tgt_vocab.id("a").unwrap()]); // absent (and a stop word anyway)
        assert!(!labels[codec.tgt_vocab.id("b").unwrap()]); // absent
    }

    #[test]
    fn instances_replay_to_the_original_sentence() {
        let codec = test_codec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let len = rng.random_range(0..=4);
            let tgt: Vec<usize> = (0..len).map(|_| rng.random_range(3..9)).collect();
            let pair = EncodedPair { src: vec![3], tgt: tgt.clone() };
            let z = sample_ordering_stage1(&pair, &mut rng);
            let inst = make_training_instance(&pair, &z, &codec).unwrap();
            // rebuild the full reformed sequence from inputs + final target
            let mut elements = inst.inputs.clone();
            elements.push(DirectedToken::new(
                *inst.targets.last().unwrap(),
                Direction::Right,
            ));
            // teacher forcing consistency: target t is the token of tuple t+1
            for (t, e) in elements[1..].iter().enumerate() {
                assert_eq!(inst.targets[t], e.token);
            }
            let (tokens, back_z) =
                restore(&ReformedSequence { elements }, &EOL_ID, &EOR_ID).unwrap();
            assert_eq!(tokens, tgt);
            assert_eq!(back_z, z);
        }
    }

    #[test]
    fn stage_boundary_step_pins() {
        let cfg = |b: f64, steps: usize| TrainConfig {
            stage_boundary: b,
            steps,
            ..TrainConfig::default()
        };
        assert_eq!(stage2_start_step(&cfg(0.9, 100)), 90);
        assert_eq!(stage2_start_step(&cfg(0.5, 7)), 4);
        assert_eq!(stage2_start_step(&cfg(1.0, 10)), 10);
        assert_eq!(stage2_start_step(&cfg(0.01, 10)), 1);
    }

    #[test]
    fn subset_is_deterministic_and_sized() {
        let a = subset_indices(10, 0.25, 7);
        let b = subset_indices(10, 0.25, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3); // ceil(2.5)
        assert!(a.iter().all(|&i| i < 10));
        let c = subset_indices(10, 0.25, 8);
        assert_ne!(a, c);
        assert_eq!(subset_indices(10, 1.0, 7).len(), 10);
    }

    #[test]
    fn stage2_selection_rules() {
        let codec = test_codec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cat = codec.tgt_vocab.id("cat").unwrap();
        let sat = codec.tgt_vocab.id("sat").unwrap();
        let b = codec.tgt_vocab.id("b").unwrap();
        let mut probs = vec![0.0f64; codec.tgt_vocab.len()];
        probs[cat] = 0.99;
        probs[sat] = 0.4;
        probs[b] = 0.3;
        // "cat" sits at extended position 2 of the target
        let pair = EncodedPair { src: vec![3], tgt: ids(&codec, &["a", "cat", "c"]) };
        for _ in 0..20 {
            let zs = stage2_orderings_from_probs(&probs, &codec, &pair, 1, &mut rng).unwrap();
            assert_eq!(zs.len(), 1);
            assert_eq!(zs[0].start(), 2);
        }
        // top-3 contains cat/sat/b but only cat occurs: one ordering
        let zs = stage2_orderings_from_probs(&probs, &codec, &pair, 3, &mut rng).unwrap();
        assert_eq!(zs.len(), 1);
        assert_eq!(zs[0].start(), 2);
        // no overlap at all: exactly one uniform fallback
        let pair2 = EncodedPair { src: vec![3], tgt: ids(&codec, &["a", "a"]) };
        for _ in 0..20 {
            let zs = stage2_orderings_from_probs(&probs, &codec, &pair2, 3, &mut rng).unwrap();
            assert_eq!(zs.len(), 1);
            assert!(is_valid_ordering(zs[0].positions(), 2));
        }
        // both occurring tokens selected when k covers them
        let pair3 = EncodedPair { src: vec![3], tgt: ids(&codec, &["cat", "sat"]) };
        let zs = stage2_orderings_from_probs(&probs, &codec, &pair3, 3, &mut rng).unwrap();
        assert_eq!(zs.len(), 2);
        assert_eq!(zs[0].start(), 1); // cat first by probability
        assert_eq!(zs[1].start(), 2);
    }

    #[test]
    fn stage2_duplicate_occurrences_uniform() {
        let codec = test_codec();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cat = codec.tgt_vocab.id("cat").unwrap();
        let mut probs = vec![0.0f64; codec.tgt_vocab.len()];
        probs[cat] = 1.0;
        // "cat" occurs at extended positions 1 and 3
        let pair = EncodedPair {
            src: vec![3],
            tgt: vec![cat, codec.tgt_vocab.id("a").unwrap(), cat],
        };
        let mut counts = [0usize; 2];
        let draws = 10_000;
        for _ in 0..draws {
            let zs = stage2_orderings_from_probs(&probs, &codec, &pair, 1, &mut rng).unwrap();
            match zs[0].start() {
                1 => counts[0] += 1,
                3 => counts[1] += 1,
                other => panic!("unexpected start {other}"),
            }
        }
        // 3 sigma around 5000 for p = 1/2
        let sigma = (draws as f64 * 0.25).sqrt();
        for c in counts {
            assert!((c as f64 - 5000.0).abs() <= 3.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn losses_add_and_flow_to_both_heads() {
        let codec = test_codec();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            src_vocab: codec.src_vocab.len(),
            tgt_vocab: codec.tgt_vocab.len(),
            max_steps: 16,
            dropout: 0.0,
        };
        let model: Model<f32> = Model::init(cfg, 3).unwrap();
        let pair = EncodedPair { src: vec![3, 4], tgt: ids(&codec, &["cat", "sat"]) };
        let inst =
            make_training_instance(&pair, &SpiralOrdering::l2r(2), &codec).unwrap();
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bound = model.bind(&tape, Some(&mut rng));
        let (total, ce, bce) = instance_losses(&tape, &bound, &inst).unwrap();
        let (tv, cv, bv) = (
            tape.value(total).item(),
            tape.value(ce).item(),
            tape.value(bce).item(),
        );
        assert_eq!(tv, cv + bv); // the sum is a single f32 add of the parts
        assert!(cv > 0.0 && bv > 0.0);
        tape.backward(total).unwrap();
        let start_grad = tape.grad(*bound.vars().get("start.w2").unwrap()).unwrap();
        let dec_grad = tape.grad(*bound.vars().get("dec0.wq").unwrap()).unwrap();
        assert!(start_grad.data().iter().any(|&g| g != 0.0));
        assert!(dec_grad.data().iter().any(|&g| g != 0.0));
    }

    fn micro_setup(kind: TaskKind) -> (Codec, ParallelData, ModelConfig) {
        let spec = TaskSpec {
            kind,
            vocab_size: 8,
            min_len: 2,
            max_len: 4,
            seed: 3,
            train_count: 24,
            dev_count: 6,
            test_count: 6,
        };
        let data = generate(&spec).unwrap();
        let codec = Codec::for_corpus(&data, Default::default());
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            src_vocab: codec.src_vocab.len(),
            tgt_vocab: codec.tgt_vocab.len(),
            max_steps: 12,
            dropout: 0.1,
        };
        (codec, data, cfg)
    }

    #[test]
    fn training_is_deterministic_and_phases_pin() {
        let (codec, data, mcfg) = micro_setup(TaskKind::Copy);
        let tcfg = TrainConfig {
            steps: 4,
            batch_size: 2,
            lr: 1e-3,
            warmup: 2,
            stage_boundary: 0.5,
            strategy: Strategy::SlmTwoStage,
            eval_interval: 1,
            seed: 42,
            ..TrainConfig::default()
        };
        let beam = BeamConfig { beam: 1, max_steps: Some(8), ..BeamConfig::default() };
        let run = || {
            let mut model = Model::init(mcfg.clone(), 7).unwrap();
            let out = train(&mut model, &codec, &data, &tcfg, &beam).unwrap();
            (metrics_to_csv(&out.metrics), model)
        };
        let (csv_a, model_a) = run();
        let (csv_b, model_b) = run();
        assert_eq!(csv_a, csv_b);
        for (name, e) in model_a.params.iter() {
            assert_eq!(e.value, model_b.params.get(name).unwrap().value, "{name}");
        }
        // ceil(0.5 * 4) = 2: step 1 stage1, steps 2..4 stage2
        let phases: Vec<&str> = csv_a
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(phases, vec!["stage1", "stage2", "stage2", "stage2"]);
    }

    #[test]
    fn l2r_strategy_uses_only_l2r_orderings() {
        let codec = test_codec();
        let model = Model::init(
            ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                d_ff: 32,
                src_vocab: codec.src_vocab.len(),
                tgt_vocab: codec.tgt_vocab.len(),
                max_steps: 16,
                dropout: 0.0,
            },
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = EncodedPair { src: vec![3], tgt: ids(&codec, &["a", "b", "c"]) };
        for _ in 0..10 {
            let zs =
                orderings_for(Strategy::L2r, false, &model, &codec, &pair, 3, &mut rng).unwrap();
            assert_eq!(zs, vec![SpiralOrdering::l2r(3)]);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_id() {
        let (codec, data, mcfg) = micro_setup(TaskKind::Copy);
        let tcfg = TrainConfig {
            steps: 50,
            batch_size: 2,
            lr: 1e18, // drive the weights to overflow
            warmup: 1,
            strategy: Strategy::SlmRandom,
            eval_interval: 50,
            seed: 1,
            ..TrainConfig::default()
        };
        let beam = BeamConfig::default();
        let mut model = Model::init(mcfg, 7).unwrap();
        match train(&mut model, &codec, &data, &tcfg, &beam) {
            Err(TrainError::NonFinite { batch }) => assert!(batch >= 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn overfits_a_single_batch_on_copy() {
        // eight fixed pairs, full-batch steps, random orderings
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 10,
            min_len: 2,
            max_len: 4,
            seed: 5,
            train_count: 8,
            dev_count: 0,
            test_count: 0,
        };
        let data = generate(&spec).unwrap();
        let codec = Codec::for_corpus(&data, Default::default());
        let mcfg = ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 1,
            d_ff: 64,
            src_vocab: codec.src_vocab.len(),
            tgt_vocab: codec.tgt_vocab.len(),
            max_steps: 12,
            dropout: 0.0,
        };
        let tcfg = TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 3e-3,
            warmup: 100,
            strategy: Strategy::SlmRandom,
            eval_interval: 2000,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut model = Model::init(mcfg, 13).unwrap();
        let out = train(&mut model, &codec, &data, &tcfg, &BeamConfig::default()).unwrap();
        assert!(
            out.final_translation_loss < 0.01,
            "translation loss after 2000 steps: {}",
            out.final_translation_loss
        );
    }

    #[test]
    fn metrics_csv_format() {
        let rows = vec![
            MetricsRow { step: 10, phase: "stage1", train_loss: 1.25, dev_bleu: 33.333 },
            MetricsRow { step: 20, phase: "stage2", train_loss: 0.5, dev_bleu: 50.0 },
        ];
        let csv = metrics_to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,phase,train_loss,dev_bleu");
        assert_eq!(lines[1], "10,stage1,1.250000,33.33");
        assert_eq!(lines[2], "20,stage2,0.500000,50.00");
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { stage_boundary: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { stage_boundary: 1.5, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { top_k: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { data_fraction: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..ok }.validate().is_err());
    }
}
