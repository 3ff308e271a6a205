//! Generative recommendation over semantic IDs: capacity-constrained residual
//! quantization, Chain-of-Attribute token sequences with task-conditioned BOS
//! and hashed content summaries, a small autoregressive scorer trained with
//! NTP, reward-weighted fine-tuning and DPO, and trie-constrained beam search.

pub mod alignment;
pub mod analysis;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod linalg;
pub mod pipeline;
pub mod quantizer;
pub mod scorer;
pub mod tokenizer;

pub use error::{Error, Result};
