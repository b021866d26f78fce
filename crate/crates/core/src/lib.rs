//! Gradient-aware training-data selection for a miniature causal language
//! model: per-instance Embedding and LM-head gradient capture, kernel-density
//! scoring, Top-N% selection, comparison baselines and text metrics.

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evalmetrics;
pub mod gradstats;
pub mod pipeline;
pub mod rng;
pub mod selector;
pub mod tinylm;

pub use error::{Error, Result};
