//! Spiral generation orderings.
//!
//! A target sentence of `T` tokens is extended with two markers: position 0
//! is `[EOL]` (end-of-left), positions `1..=T` are the tokens in written
//! order, and position `T+1` is `[EOR]` (end-of-right). A spiral ordering
//! visits all `T+2` extended positions such that every prefix of the visit
//! order covers a contiguous interval: generation may start anywhere inside
//! the sentence and only ever attaches the next token immediately left or
//! right of the segment built so far. Generation is complete once both end
//! markers have been produced.
//!
//! The module also defines the reformed view of a sentence under an
//! ordering: a sequence of `(token, next-direction)` tuples that a
//! left-to-right decoder can consume, plus the text trace format used by the
//! CLI (`token/+` and `token/-` items, final element bare).

use std::collections::BTreeSet;
use std::fmt;
use std::ops::RangeInclusive;

use rand::Rng;
use thiserror::Error;

/// Enumeration is exponential in `T`; anything larger is refused.
pub const MAX_ENUMERATION_TOKENS: usize = 10;
/// Largest `T` for which the exact ordering count `2^(T+1)` fits in a `u64`.
pub const MAX_COUNT_TOKENS: usize = 62;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrderingError {
    #[error("enumeration supports at most {max} tokens, got {got}")]
    EnumerationTooLarge { got: usize, max: usize },
    #[error("ordering count 2^(T+1) overflows u64 for T={got} (max T={max})")]
    CountOverflow { got: usize, max: usize },
    #[error("not a valid spiral ordering for {tokens} tokens: {positions:?}")]
    InvalidOrdering { positions: Vec<usize>, tokens: usize },
    #[error("start span {lo}..={hi} invalid for {tokens} tokens")]
    InvalidSpan { lo: usize, hi: usize, tokens: usize },
    #[error("token attached left of the {} marker", EOL_MARK)]
    AttachBeyondLeftEnd,
    #[error("token attached right of the {} marker", EOR_MARK)]
    AttachBeyondRightEnd,
    #[error("duplicate {0} marker")]
    DuplicateEndMarker(&'static str),
    #[error("missing {0} marker")]
    MissingEndMarker(&'static str),
    #[error("a reformed sequence needs at least the two end markers")]
    TooShort,
    #[error("malformed trace item {0:?}")]
    BadTraceItem(String),
    #[error("empty trace")]
    EmptyTrace,
}

pub const EOL_MARK: &str = "[EOL]";
pub const EOR_MARK: &str = "[EOR]";

/// Side on which the *next* element of a reformed sequence attaches.
///
/// Rendered `-` (left) and `+` (right) in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    pub fn render(self) -> char {
        match self {
            Direction::Left => '-',
            Direction::Right => '+',
        }
    }

    pub fn parse(s: &str) -> Option<Direction> {
        match s {
            "-" => Some(Direction::Left),
            "+" => Some(Direction::Right),
            _ => None,
        }
    }

    pub fn flip(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }

    /// Row of this direction in the direction-embedding table.
    pub fn embedding_row(self) -> usize {
        match self {
            Direction::Left => 0,
            Direction::Right => 1,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render())
    }
}

/// A permutation of the extended positions `{0, …, T+1}` whose every prefix
/// is a contiguous interval.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpiralOrdering {
    positions: Vec<usize>,
    tokens: usize,
}

/// True iff `positions` is a permutation of `{0..=tokens+1}` and every
/// prefix covers a contiguous integer interval.
pub fn is_valid_ordering(positions: &[usize], tokens: usize) -> bool {
    let n = tokens + 2;
    if positions.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in positions {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    let (mut lo, mut hi) = (positions[0], positions[0]);
    for &p in &positions[1..] {
        if p + 1 == lo {
            lo = p;
        } else if p == hi + 1 {
            hi = p;
        } else {
            return false;
        }
    }
    true
}

impl SpiralOrdering {
    pub fn new(positions: Vec<usize>, tokens: usize) -> Result<Self, OrderingError> {
        if is_valid_ordering(&positions, tokens) {
            Ok(SpiralOrdering { positions, tokens })
        } else {
            Err(OrderingError::InvalidOrdering { positions, tokens })
        }
    }

    /// `[0, 1, …, T+1]`: start at `[EOL]`, keep appending to the right.
    pub fn l2r(tokens: usize) -> Self {
        SpiralOrdering {
            positions: (0..tokens + 2).collect(),
            tokens,
        }
    }

    /// `[T+1, T, …, 0]`: start at `[EOR]`, keep appending to the left.
    pub fn r2l(tokens: usize) -> Self {
        SpiralOrdering {
            positions: (0..tokens + 2).rev().collect(),
            tokens,
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the two end markers
    }

    /// First visited extended position.
    pub fn start(&self) -> usize {
        self.positions[0]
    }

    /// Reflection `i ↦ T+1−i`; maps valid orderings to valid orderings.
    pub fn mirrored(&self) -> SpiralOrdering {
        let n = self.tokens + 1;
        SpiralOrdering {
            positions: self.positions.iter().map(|&p| n - p).collect(),
            tokens: self.tokens,
        }
    }

    /// The removal bits this ordering corresponds to under the end-removal
    /// bijection (see [`ordering_from_removal_bits`]).
    pub fn removal_bits(&self) -> Vec<Direction> {
        let mut bits = Vec::with_capacity(self.tokens + 1);
        let (mut lo, mut hi) = (0usize, self.tokens + 1);
        for &p in self.positions.iter().rev() {
            if lo == hi {
                break; // survivor
            }
            if p == lo {
                bits.push(Direction::Left);
                lo += 1;
            } else {
                debug_assert_eq!(p, hi);
                bits.push(Direction::Right);
                hi -= 1;
            }
        }
        bits
    }
}

impl fmt::Display for SpiralOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, p) in self.positions.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, "]")
    }
}

/// Build an ordering from `T+1` end-removal bits.
///
/// Keep the interval `[0, T+1]`; for each bit remove the left (`Left`) or
/// right (`Right`) end into a removal list; append the last survivor; the
/// ordering is the reversed removal list. This is a bijection between bit
/// strings of length `T+1` and valid orderings, which is what makes the
/// exact count `2^(T+1)` and gives an exactly uniform sampler.
pub fn ordering_from_removal_bits(bits: &[Direction]) -> SpiralOrdering {
    assert!(!bits.is_empty(), "need T+1 >= 1 removal bits");
    let tokens = bits.len() - 1;
    let (mut lo, mut hi) = (0usize, tokens + 1);
    let mut order = Vec::with_capacity(tokens + 2);
    for &bit in bits {
        match bit {
            Direction::Left => {
                order.push(lo);
                lo += 1;
            }
            Direction::Right => {
                order.push(hi);
                hi -= 1;
            }
        }
    }
    debug_assert_eq!(lo, hi);
    order.push(lo);
    order.reverse();
    SpiralOrdering {
        positions: order,
        tokens,
    }
}

/// All valid orderings for `T` tokens, by walking every removal-bit string.
pub fn enumerate_orderings(tokens: usize) -> Result<Vec<SpiralOrdering>, OrderingError> {
    if tokens > MAX_ENUMERATION_TOKENS {
        return Err(OrderingError::EnumerationTooLarge {
            got: tokens,
            max: MAX_ENUMERATION_TOKENS,
        });
    }
    let n_bits = tokens + 1;
    let mut out = Vec::with_capacity(1usize << n_bits);
    for pattern in 0u64..(1u64 << n_bits) {
        let bits: Vec<Direction> = (0..n_bits)
            .map(|i| {
                if (pattern >> i) & 1 == 1 {
                    Direction::Right
                } else {
                    Direction::Left
                }
            })
            .collect();
        out.push(ordering_from_removal_bits(&bits));
    }
    Ok(out)
}

/// Exact number of valid orderings: `2^(T+1)`.
pub fn count_orderings(tokens: usize) -> Result<u64, OrderingError> {
    if tokens > MAX_COUNT_TOKENS {
        return Err(OrderingError::CountOverflow {
            got: tokens,
            max: MAX_COUNT_TOKENS,
        });
    }
    Ok(1u64 << (tokens + 1))
}

/// Sample uniformly over all `2^(T+1)` valid orderings by drawing `T+1`
/// fair removal bits.
pub fn sample_uniform_ordering<R: Rng + ?Sized>(tokens: usize, rng: &mut R) -> SpiralOrdering {
    let bits: Vec<Direction> = (0..tokens + 1)
        .map(|_| {
            if rng.random::<bool>() {
                Direction::Right
            } else {
                Direction::Left
            }
        })
        .collect();
    ordering_from_removal_bits(&bits)
}

/// Sample an ordering that starts with the extended positions of `span`
/// (left to right), completing the remainder uniformly among all valid
/// completions.
///
/// A completion interleaves `span.start()` left-extensions with
/// `T+1−span.end()` right-extensions; each step picks left with probability
/// `left_remaining / (left_remaining + right_remaining)`, which makes every
/// interleaving equally likely.
pub fn sample_constrained_ordering<R: Rng + ?Sized>(
    tokens: usize,
    span: RangeInclusive<usize>,
    rng: &mut R,
) -> Result<SpiralOrdering, OrderingError> {
    let (lo, hi) = (*span.start(), *span.end());
    if lo > hi || hi > tokens + 1 {
        return Err(OrderingError::InvalidSpan { lo, hi, tokens });
    }
    let mut positions: Vec<usize> = (lo..=hi).collect();
    let mut lefts = lo;
    let mut rights = tokens + 1 - hi;
    let (mut cur_lo, mut cur_hi) = (lo, hi);
    while lefts + rights > 0 {
        let go_left = rng.random_range(0..lefts + rights) < lefts;
        if go_left {
            cur_lo -= 1;
            positions.push(cur_lo);
            lefts -= 1;
        } else {
            cur_hi += 1;
            positions.push(cur_hi);
            rights -= 1;
        }
    }
    Ok(SpiralOrdering {
        positions,
        tokens,
    })
}

/// One element of a reformed sequence: the token placed at this step and the
/// side on which the *next* element attaches.
///
/// The direction of the final element of a complete sequence is unused; it
/// is fixed to `Right` so that equal sequences compare and serialize
/// identically.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DirectedToken<T> {
    pub token: T,
    pub direction: Direction,
}

impl<T> DirectedToken<T> {
    pub fn new(token: T, direction: Direction) -> Self {
        DirectedToken { token, direction }
    }
}

/// A sentence rewritten in decode order as `(token, next-direction)` tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReformedSequence<T> {
    pub elements: Vec<DirectedToken<T>>,
}

impl<T> ReformedSequence<T> {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Rewrite `tokens` in the decode order given by `z`.
///
/// Element `i` carries the token at extended position `z_i` (positions `0`
/// and `T+1` map to `eol` / `eor`); its direction is `Left` when the next
/// visited position extends the segment on the left, `Right` otherwise. The
/// final element's direction is `Right` by convention.
pub fn reform<T: Clone>(
    tokens: &[T],
    z: &SpiralOrdering,
    eol: T,
    eor: T,
) -> Result<ReformedSequence<T>, OrderingError> {
    if z.token_count() != tokens.len() {
        return Err(OrderingError::InvalidOrdering {
            positions: z.positions.clone(),
            tokens: tokens.len(),
        });
    }
    let t = tokens.len();
    let pick = |p: usize| -> T {
        if p == 0 {
            eol.clone()
        } else if p == t + 1 {
            eor.clone()
        } else {
            tokens[p - 1].clone()
        }
    };
    let zs = z.positions();
    let mut elements = Vec::with_capacity(zs.len());
    let mut min_seen = zs[0];
    for (i, &p) in zs.iter().enumerate() {
        let direction = match zs.get(i + 1) {
            Some(&next) if next < min_seen => Direction::Left,
            _ => Direction::Right,
        };
        min_seen = min_seen.min(p);
        elements.push(DirectedToken::new(pick(p), direction));
    }
    Ok(ReformedSequence { elements })
}

/// Replay a reformed sequence back into the linear sentence and the ordering
/// that produced it.
///
/// Fails when a token would attach outside the end markers, or when an end
/// marker is duplicated, missing, or not at its end of the result.
pub fn restore<T: Clone + PartialEq>(
    seq: &ReformedSequence<T>,
    eol: &T,
    eor: &T,
) -> Result<(Vec<T>, SpiralOrdering), OrderingError> {
    let n = seq.elements.len();
    if n < 2 {
        return Err(OrderingError::TooShort);
    }
    // Relative positions: the first element sits at 0, left attaches extend
    // the interval downward, right attaches upward.
    let mut rel = Vec::with_capacity(n);
    let (mut lo, mut hi) = (0i64, 0i64);
    let mut eol_rel: Option<i64> = None;
    let mut eor_rel: Option<i64> = None;
    for (i, elem) in seq.elements.iter().enumerate() {
        let r = if i == 0 {
            0
        } else {
            match seq.elements[i - 1].direction {
                Direction::Left => {
                    if eol_rel == Some(lo) {
                        return Err(OrderingError::AttachBeyondLeftEnd);
                    }
                    lo -= 1;
                    lo
                }
                Direction::Right => {
                    if eor_rel == Some(hi) {
                        return Err(OrderingError::AttachBeyondRightEnd);
                    }
                    hi += 1;
                    hi
                }
            }
        };
        if elem.token == *eol {
            if eol_rel.is_some() {
                return Err(OrderingError::DuplicateEndMarker(EOL_MARK));
            }
            eol_rel = Some(r);
        } else if elem.token == *eor {
            if eor_rel.is_some() {
                return Err(OrderingError::DuplicateEndMarker(EOR_MARK));
            }
            eor_rel = Some(r);
        }
        rel.push(r);
    }
    let eol_rel = eol_rel.ok_or(OrderingError::MissingEndMarker(EOL_MARK))?;
    let eor_rel = eor_rel.ok_or(OrderingError::MissingEndMarker(EOR_MARK))?;
    // End markers must have ended up at the extremes.
    if eol_rel != lo {
        return Err(OrderingError::AttachBeyondLeftEnd);
    }
    if eor_rel != hi {
        return Err(OrderingError::AttachBeyondRightEnd);
    }
    let tokens_count = n - 2;
    let positions: Vec<usize> = rel.iter().map(|&r| (r - lo) as usize).collect();
    let mut linear: Vec<Option<T>> = vec![None; tokens_count];
    for (elem, &p) in seq.elements.iter().zip(&positions) {
        if p > 0 && p < tokens_count + 1 {
            linear[p - 1] = Some(elem.token.clone());
        }
    }
    let tokens: Vec<T> = linear.into_iter().map(|t| t.expect("interval covered")).collect();
    let z = SpiralOrdering {
        positions,
        tokens: tokens_count,
    };
    debug_assert!(is_valid_ordering(z.positions(), tokens_count));
    Ok((tokens, z))
}

/// Serialize a reformed sequence in the trace text format: space-separated
/// `token/dir` items, the final item bare (its direction is unused).
pub fn format_trace<T: fmt::Display>(seq: &ReformedSequence<T>) -> String {
    let n = seq.elements.len();
    let mut out = String::new();
    for (i, elem) in seq.elements.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        if i + 1 == n {
            out.push_str(&elem.token.to_string());
        } else {
            out.push_str(&format!("{}/{}", elem.token, elem.direction));
        }
    }
    out
}

/// Parse the trace text format. All items but the last must carry a
/// direction suffix; a direction on the final item is accepted and ignored
/// in favor of the `Right` convention.
pub fn parse_trace(text: &str) -> Result<ReformedSequence<String>, OrderingError> {
    let items: Vec<&str> = text.split_whitespace().collect();
    if items.is_empty() {
        return Err(OrderingError::EmptyTrace);
    }
    let n = items.len();
    let mut elements = Vec::with_capacity(n);
    for (i, item) in items.iter().enumerate() {
        let last = i + 1 == n;
        match item.rsplit_once('/') {
            Some((tok, d)) if !tok.is_empty() && Direction::parse(d).is_some() => {
                let dir = if last {
                    Direction::Right
                } else {
                    Direction::parse(d).unwrap()
                };
                elements.push(DirectedToken::new(tok.to_string(), dir));
            }
            _ if last => {
                elements.push(DirectedToken::new(item.to_string(), Direction::Right));
            }
            _ => return Err(OrderingError::BadTraceItem(item.to_string())),
        }
    }
    Ok(ReformedSequence { elements })
}

/// Distinct start positions over a set of orderings; handy for reporting.
pub fn start_positions(orderings: &[SpiralOrdering]) -> BTreeSet<usize> {
    orderings.iter().map(|z| z.start()).collect()
}
