//! Synthetic parallel tasks, vocabularies, stop words, and BLEU.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ordering::{EOL_MARK, EOR_MARK};

pub const PAD_ID: usize = 0;
pub const EOL_ID: usize = 1;
pub const EOR_ID: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
/// Ids below this are the reserved pad/[EOL]/[EOR] rows.
pub const RESERVED_TOKENS: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown token {0:?} (vocabulary is frozen)")]
    UnknownToken(String),
    #[error("vocabulary is frozen; cannot add {0:?}")]
    Frozen(String),
    #[error("task vocabulary of {vocab} tokens too small for sentences up to {max_len} distinct tokens")]
    VocabTooSmall { vocab: usize, max_len: usize },
    #[error("invalid task spec: {0}")]
    BadSpec(String),
    #[error("could not fill the requested splits after {0} attempts")]
    SpaceExhausted(usize),
    #[error("BLEU needs equal, nonempty candidate and reference counts (got {candidates} vs {references})")]
    BadBleuInput {
        candidates: usize,
        references: usize,
    },
    #[error("stop-word file {path}: {source}")]
    StopwordIo {
        path: String,
        source: std::io::Error,
    },
}

/// Token ↔ id bijection with reserved rows for pad and the two end markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        };
        for t in [PAD_TOKEN, EOL_MARK, EOR_MARK] {
            v.add(t).expect("fresh vocab");
        }
        debug_assert_eq!(v.id(PAD_TOKEN), Some(PAD_ID));
        debug_assert_eq!(v.id(EOL_MARK), Some(EOL_ID));
        debug_assert_eq!(v.id(EOR_MARK), Some(EOR_ID));
        v
    }

    pub fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        let mut v = Vocab::new();
        for t in tokens {
            let t = t.into();
            if v.id(&t).is_none() {
                v.add(t).expect("unfrozen");
            }
        }
        v.freeze();
        v
    }

    pub fn add(&mut self, token: impl Into<String>) -> Result<usize, CorpusError> {
        let token = token.into();
        if self.frozen {
            return Err(CorpusError::Frozen(token));
        }
        if let Some(&id) = self.index.get(&token) {
            return Ok(id);
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved rows always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, CorpusError> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| CorpusError::UnknownToken(t.clone())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&id| self.tokens[id].clone()).collect()
    }

    /// Space-joined token list in id order; inverse of [`Vocab::from_listing`].
    pub fn to_listing(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn from_listing(listing: &str) -> Result<Self, CorpusError> {
        let mut tokens = listing.split_whitespace();
        for expect in [PAD_TOKEN, EOL_MARK, EOR_MARK] {
            if tokens.next() != Some(expect) {
                return Err(CorpusError::BadSpec(format!(
                    "vocab listing must start with the reserved tokens, missing {expect}"
                )));
            }
        }
        Ok(Vocab::from_tokens(tokens.map(str::to_string)))
    }
}

/// Whitespace tokenization; the toolkit's corpora are pre-tokenized text.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Stop-word file: one token per line, `#` starts a comment.
pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::StopwordIo {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_stopwords(&text))
}

/// Bundled English list.
pub fn default_stopwords() -> BTreeSet<String> {
    parse_stopwords(include_str!("data/stopwords_en.txt"))
}

fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Lexicon,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Lexicon => "lexicon",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "lexicon" => Ok(TaskKind::Lexicon),
            other => Err(format!("unknown task kind {other:?} (copy|reverse|lexicon)")),
        }
    }
}

/// Recipe for a synthetic parallel corpus.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 20,
            min_len: 3,
            max_len: 10,
            seed: 17,
            train_count: 2000,
            dev_count: 128,
            test_count: 128,
        }
    }
}

impl TaskSpec {
    pub fn source_alphabet(&self) -> Vec<String> {
        let prefix = match self.kind {
            TaskKind::Lexicon => "s",
            _ => "w",
        };
        (0..self.vocab_size).map(|i| format!("{prefix}{i:02}")).collect()
    }

    pub fn target_alphabet(&self) -> Vec<String> {
        match self.kind {
            TaskKind::Lexicon => (0..self.vocab_size).map(|i| format!("t{i:02}")).collect(),
            _ => self.source_alphabet(),
        }
    }

    /// The bijective source→target token map of the lexicon task.
    pub fn lexicon_map(&self) -> BTreeMap<String, String> {
        self.source_alphabet()
            .into_iter()
            .zip(self.target_alphabet())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ParallelData {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl ParallelData {
    pub fn total(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }
}

/// Map tokens through the lexicon and swap adjacent pairs, so target order
/// differs from source order and alignments are nontrivial.
pub fn lexicon_target(src: &[String], map: &BTreeMap<String, String>) -> Vec<String> {
    let mut out: Vec<String> = src
        .iter()
        .map(|t| map.get(t).cloned().unwrap_or_else(|| t.clone()))
        .collect();
    let mut i = 0;
    while i + 1 < out.len() {
        out.swap(i, i + 1);
        i += 2;
    }
    out
}

fn target_for(kind: TaskKind, src: &[String], map: &BTreeMap<String, String>) -> Vec<String> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().cloned().collect(),
        TaskKind::Lexicon => lexicon_target(src, map),
    }
}

/// FNV-1a, pinned here so split assignment never depends on the std hasher.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Generate a parallel corpus. Sentences draw distinct tokens from the task
/// alphabet; each source sentence is assigned to exactly one split by
/// hashing its text, which keeps train/dev/test disjoint by construction.
pub fn generate(spec: &TaskSpec) -> Result<ParallelData, CorpusError> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(CorpusError::BadSpec(format!(
            "bad length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    if spec.vocab_size < spec.max_len {
        return Err(CorpusError::VocabTooSmall {
            vocab: spec.vocab_size,
            max_len: spec.max_len,
        });
    }
    let alphabet = spec.source_alphabet();
    let map = spec.lexicon_map();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = ParallelData::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let wanted = spec.train_count + spec.dev_count + spec.test_count;
    let budget = wanted.saturating_mul(1000).max(10_000);
    let mut attempts = 0usize;
    while data.total() < wanted {
        attempts += 1;
        if attempts > budget {
            return Err(CorpusError::SpaceExhausted(budget));
        }
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut pool = alphabet.clone();
        pool.shuffle(&mut rng);
        pool.truncate(len);
        let line = pool.join(" ");
        if !seen.insert(line.clone()) {
            continue;
        }
        let bucket = fnv1a(&line) % 10;
        let (split, cap) = match bucket {
            8 => (&mut data.dev, spec.dev_count),
            9 => (&mut data.test, spec.test_count),
            _ => (&mut data.train, spec.train_count),
        };
        if split.len() >= cap {
            continue;
        }
        let tgt = target_for(spec.kind, &pool, &map);
        split.push(Pair { src: pool, tgt });
    }
    Ok(data)
}

/// Corpus-level BLEU in `[0, 1]`: clipped n-gram precisions up to
/// `max_order`, geometric mean, brevity penalty. Any empty precision order
/// yields 0 (no smoothing).
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_order: usize,
) -> Result<f64, CorpusError> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(CorpusError::BadBleuInput {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut matches = vec![0u64; max_order];
    let mut totals = vec![0u64; max_order];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=max_order {
            if cand.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            for w in reference.windows(n) {
                *ref_counts.entry(w).or_insert(0) += 1;
            }
            let mut cand_counts: HashMap<&[String], u64> = HashMap::new();
            for w in cand.windows(n) {
                *cand_counts.entry(w).or_insert(0) += 1;
            }
            totals[n - 1] += (cand.len() + 1 - n) as u64;
            for (gram, count) in cand_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
        }
    }
    let mut log_precision_sum = 0.0;
    for n in 0..max_order {
        if matches[n] == 0 || totals[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += ((matches[n] as f64) / (totals[n] as f64)).ln();
    }
    let brevity = if cand_len >= ref_len || cand_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(brevity * (log_precision_sum / max_order as f64).exp())
}

/// Vocabularies plus the stop-word view a trained model needs at decode
/// time; serialized into the checkpoint config block.
#[derive(Debug, Clone)]
pub struct Codec {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub stopwords: BTreeSet<String>,
    stop_ids: BTreeSet<usize>,
}

impl Codec {
    pub fn new(src_vocab: Vocab, tgt_vocab: Vocab, stopwords: BTreeSet<String>) -> Self {
        let stop_ids = tgt_vocab
            .tokens()
            .iter()
            .enumerate()
            .filter(|(_, t)| stopwords.contains(&t.to_lowercase()))
            .map(|(id, _)| id)
            .collect();
        Codec {
            src_vocab,
            tgt_vocab,
            stopwords,
            stop_ids,
        }
    }

    /// Build vocabularies covering every token of the corpus.
    pub fn for_corpus(data: &ParallelData, stopwords: BTreeSet<String>) -> Self {
        let mut src_tokens = BTreeSet::new();
        let mut tgt_tokens = BTreeSet::new();
        for pair in data
            .train
            .iter()
            .chain(data.dev.iter())
            .chain(data.test.iter())
        {
            src_tokens.extend(pair.src.iter().cloned());
            tgt_tokens.extend(pair.tgt.iter().cloned());
        }
        Codec::new(
            Vocab::from_tokens(src_tokens),
            Vocab::from_tokens(tgt_tokens),
            stopwords,
        )
    }

    pub fn is_stopword_id(&self, id: usize) -> bool {
        self.stop_ids.contains(&id)
    }

    pub fn is_special_id(&self, id: usize) -> bool {
        id < RESERVED_TOKENS
    }

    /// Target-vocab ids eligible as starting tokens (not special, not a
    /// stop word).
    pub fn eligible_start(&self, id: usize) -> bool {
        !self.is_special_id(id) && !self.is_stopword_id(id)
    }
}
