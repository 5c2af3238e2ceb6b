//! Generative retrieval over a closed set of page titles.
//!
//! A small trainable policy scores next tokens; a prefix trie over the
//! corpus titles constrains beam decoding so only real titles can come out;
//! REINFORCE fine-tunes the policy with retrieval quality as the reward.
//! Around that core sit a BM25 inverted index (title imputation, context
//! retrieval, hard-negative mining), builders for reranker and reader
//! inputs, KILT-style metrics, and a file-based stage pipeline that the
//! `trieval` binary drives.

pub mod bm25;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod reinforce;
pub mod report;
pub mod rerank;
pub mod scalar;
pub mod seeding;
pub mod snapshot;
pub mod trie;
pub mod vocab;

pub use scalar::Scalar;

/// Scalar type used by the shipped pipeline and the CLI.
pub type DefaultScalar = f64;
