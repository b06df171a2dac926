//! Word-level LSTM language modeling with thinking-token injection.
//!
//! The pipeline: ingest whitespace-tokenized text ([`corpus`]), optionally
//! insert `<T>` thinking tokens after every observed token ([`inject`]),
//! train a single-layer LSTM from scratch ([`model`], [`trainer`]), and
//! evaluate masked perplexity, per-sentence deltas between a baseline and
//! a thinking-token model, and per-word probabilities ([`eval`]).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod inject;
pub mod math;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
