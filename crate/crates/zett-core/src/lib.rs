//! Zero-shot triplet extraction by template infilling.
//!
//! The crate turns relation extraction into a text-infilling problem: a
//! relation template such as `<head> is employed by <tail>` is masked with
//! sentinel tokens, appended to the input context, and a sequence-to-sequence
//! model fills the sentinels with entity spans copied from the context.
//! Decoding is restricted to tokens that actually occur in the context, and
//! candidate relations are pre-filtered by embedding similarity between the
//! context and the relation description. Because templates are plain text,
//! relations never seen during training can be extracted zero-shot.
//!
//! Module map:
//! - [`data`]: datasets, relation registry, deterministic fold splits
//! - [`templates`]: template validation, masking, filling, output parsing
//! - [`tokenizer`]: word-level vocabulary with reserved sentinel ids
//! - [`model`]: a from-scratch micro encoder-decoder transformer
//! - [`backend`]: the scoring interface the decoder consumes
//! - [`decoder`]: constrained beam search over the infilling grammar
//! - [`filter`]: relation pre-filtering by description similarity
//! - [`pipeline`]: end-to-end extraction, ranking, threshold calibration
//! - [`tgen`]: template mining, paraphrase selection, autogeneration
//! - [`eval`]: metrics, ablations, human-evaluation workflow
//! - [`synthetic`]: a seeded synthetic benchmark with known solvability

pub mod backend;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod filter;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod templates;
pub mod tgen;
pub mod tokenizer;

pub use error::ZettError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, ZettError>;
