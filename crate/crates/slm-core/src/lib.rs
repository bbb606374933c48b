//! Spiral sequence generation toolkit.
//!
//! A desk-scale encoder-decoder toolkit that generates target sequences
//! starting from an arbitrary interior token and expanding left/right until
//! both end markers have been produced. The pieces:
//!
//! - [`ordering`]: spiral generation orderings, their enumeration and
//!   sampling, and the bijection between (sentence, ordering) pairs and
//!   direction-annotated reformed sequences.
//! - [`numerics`]: dense array math with reverse-mode differentiation, an
//!   Adam optimizer with warmup, and the binary checkpoint format.
//! - [`model`]: the encoder-decoder network with direction embeddings and
//!   the attention-pooled starting-token prediction head.
//! - [`training`]: order-sampled teacher forcing, the summed two-head loss,
//!   and the two-stage sampling training loop.
//! - [`inference`]: direction-branching beam search with start-head
//!   initialization, length penalty, and forced-start decoding.
//! - [`corpus`]: synthetic parallel tasks, vocabularies, stop words, BLEU.
//! - [`config`]: the flat `key = value` run configuration shared by the CLI.

pub mod config;
pub mod corpus;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod ordering;
pub mod training;
