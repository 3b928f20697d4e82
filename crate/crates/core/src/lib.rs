//! Replay-based class-incremental continual learning.
//!
//! The crate is organised around the stages of an incremental run:
//!
//! - [`stream`]: datasets, class-incremental task schedules and splits.
//! - [`model`]: a backbone + linear head classifier with an embedding tap,
//!   Adam training and instrumented call counting.
//! - [`uncertainty`]: feature- and embedding-space perturbations and the
//!   Monte-Carlo uncertainty score.
//! - [`memory`]: the replay buffer and its memory-update algorithms
//!   (random, reservoir, prototype/herding, diversity-aware stride selection).
//! - [`learn`]: cross-entropy, distillation and mixup, plus the per-task
//!   training procedure.
//! - [`metrics`]: accuracy matrix, ACC and BWT.
//! - [`cli`]: experiment configuration, `run` and `compare`.

pub mod cli;
pub mod error;
pub mod learn;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod stream;
pub mod uncertainty;

pub use error::{Error, Result};
