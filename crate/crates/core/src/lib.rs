//! Desk-scale lab for sparse mixture-of-experts routing and gate-load-driven
//! data-mixture scheduling.
//!
//! * [`moe`]: a small top-K MoE language model with a CV² balance loss,
//!   hand-written gradients, AdamW and checkpoints.
//! * [`gate_stats`]: per-dataset gate-load probing, row normalization and
//!   pairwise L2 distances.
//! * [`scheduler`]: the dynamic sampling-weight update and its baselines.
//! * [`synth`]: seeded Markov-chain corpora with controllable overlap.
//! * [`trainer`]: the training loop, evaluation and multi-seed sweeps.
//! * [`cli_io`]: run directories, config overrides, trace replay and reports.

pub mod cli_io;
pub mod error;
pub mod gate_stats;
pub mod moe;
pub mod scheduler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
