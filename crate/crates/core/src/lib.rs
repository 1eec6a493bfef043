//! Circuit-targeted supervised fine-tuning on a desk-scale transformer.
//!
//! The crate trains a small decoder-only classifier on synthetic
//! "multilingual" tasks, decomposes head contributions into baseline and
//! input-specific streams, grows attention-head circuits backward from the
//! label readout, and fine-tunes only the selected heads (plus LayerNorm)
//! through gradient masking. Transfer, forgetting and circuit faithfulness
//! are measured by the [`harness`].

pub mod cdt;
pub mod circuit;
pub mod corpus;
pub mod error;
pub mod faithfulness;
pub mod harness;
pub mod model;
pub mod scoring;
pub mod tolerances;
pub mod tuning;

pub use error::{Error, Result};
