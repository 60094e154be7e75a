//! Desk-scale text-to-SQL: Spider-format ingestion, schema serialization,
//! small encoder–decoder and decoder-only transformers trained from scratch,
//! beam-search decoding, and LFAcc / BLEU / EM scoring.

pub mod error;
pub mod numerics;
pub mod tokenizer;
pub mod data;
pub mod model;
pub mod decoding;
pub mod metrics;
pub mod training;
pub mod cli;

pub use error::{Error, Result};
