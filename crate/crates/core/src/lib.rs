//! Two-dimensional matryoshka sentence embeddings at desk scale.
//!
//! A small pre-norm transformer encoder is trained so that the CLS state of
//! every layer `n` and every leading slice of `d` components of that state is
//! a usable sentence embedding. The crate covers the whole loop:
//!
//! - [`autodiff`]: a define-by-run reverse-mode tape over `f64` tensors.
//! - [`encoder`]: tokenizer, model weights, per-layer CLS embeddings.
//! - [`objectives`]: contrastive, pair-regression and KL alignment losses.
//! - [`trainer`]: per-step layer/dimension sampling and the joint objective.
//! - [`eval`]: Spearman rank correlation over a layer x dimension grid.
//! - [`elastic`]: lossless model truncation and early-exit latency benchmarks.
//! - [`data`]: JSON-lines datasets, synthetic corpora and checkpoints.

pub mod autodiff;
pub mod data;
pub mod elastic;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod rng;
pub mod trainer;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};
