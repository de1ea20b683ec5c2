//! Continual pre-training with a mixture of losses.
//!
//! Every training sequence carries a corpus tag. Domain sequences are trained
//! with next-token cross-entropy; general sequences are pulled towards a frozen
//! base model with a truncated reverse KL divergence. A small coefficient
//! blends the off-role loss into each sequence's objective.
//!
//! The crate is organised bottom-up:
//!
//! - [`losses`]: loss kernels with analytic gradients w.r.t. student logits.
//! - [`model`]: a small decoder-only transformer, low-rank adapters, Adam and
//!   checkpoints.
//! - [`data`]: corpus ingestion, templating, packing, mixing and splitting.
//! - [`trainer`]: the training loop, schedule, validation and convergence
//!   detection.
//! - [`experiments`]: ratio sweeps, ablations and comparison reports.
//! - [`cli`]: the command-line surface.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
