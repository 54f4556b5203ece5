//! Response-conditioned turn-shift prediction.
//!
//! A small causal language model is trained either on `H TS CU TS`
//! sequences (baseline) or on `R TS H TS CU TS` sequences with the loss
//! restricted to the current utterance (response-conditioned). The crate
//! covers the full pipeline: corpora, vocabulary, sequence encoding, the
//! transformer with exact gradients, training, turn-level metrics, divergence
//! analysis and an incremental response ranker.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod plot;
pub mod ranker;
pub mod sequencing;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
