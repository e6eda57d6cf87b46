//! Byte-level BPE tokenizers, vocabulary transplantation between models, and a
//! small pure-Rust transformer stack for validating the whole procedure
//! end to end on synthetic languages.
//!
//! The crate is organised around the lifecycle of a cross-lingual adaptation
//! experiment:
//!
//! * [`tokenizer`] — trainable byte-level BPE with two inference modes, plus
//!   the prune/extend operations used to build a target-language vocabulary
//!   that still overlaps heavily with its donor.
//! * [`sampler`] — corpus capping, temperature sampling and budget-constrained
//!   allocation across languages; builds the concrete training mixtures.
//! * [`surgery`] — re-initialises an embedding matrix for a new vocabulary by
//!   copying rows for shared tokens and pooling donor sub-token rows for the
//!   rest, then splices it onto a trained model body.
//! * [`model`] — a decoder-only transformer (RMSNorm, rotary positions, tied
//!   embeddings, optional low-rank adapters) with handwritten forward and
//!   backward passes, generic over `f32`/`f64`.
//! * [`trainer`] — Adam, sequence packing, staged training with per-stage
//!   freeze contracts, and finite-difference gradient checking.
//! * [`evalh`] — perplexity, option-scoring classification, greedy decoding
//!   and a small latency benchmark.
//! * [`synth`] — deterministic synthetic language generators used by the
//!   test-bed (word-cipher and script-shift transforms of a base language).
//! * [`pipeline`] — glues the stages into a reproducible experiment with
//!   checkpointing, a manifest and resumable stage skipping.

pub mod evalh;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod surgery;
pub mod synth;
pub mod tokenizer;
pub mod trainer;
