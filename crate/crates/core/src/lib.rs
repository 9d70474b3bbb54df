//! Modality-agnostic adapter fusion over precomputed multi-modal embeddings.
//!
//! Per-modality adapters project every modality to a common width, a learned
//! modality embedding tags each token with its source, and a Transformer
//! encoder without positional encoding fuses the concatenated sequence.
//! Masked average pooling and a linear classifier produce class logits.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod optim;
pub mod train;

pub use error::{MaaError, Result};
