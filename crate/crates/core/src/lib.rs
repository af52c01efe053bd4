//! Personalized, context-aware entity correction for multi-turn dialogue
//! query rewriting.
//!
//! The pipeline: a shared-weight hashed-feature encoder embeds the flattened
//! dialogue context and each user's frequent entities; the best-scoring
//! candidate is gated on its top-2 scores and spliced into the defective
//! query in place of the detected mention.

pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod jsonl;
pub mod model;
pub mod retrieval;
pub mod text;
pub mod training;

#[cfg(feature = "service")]
pub mod config;
#[cfg(feature = "service")]
pub mod loadtest;
#[cfg(feature = "service")]
pub mod service;

pub use error::{Error, Result};
