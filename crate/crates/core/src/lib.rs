//! DisMax: distance-based classification heads with out-of-distribution
//! scoring, fractional probability regularization and temperature
//! calibration, sized for desk-scale experiments.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense `f64` tensors and a small reverse-mode tape.
//! - [`model`]: the MLP feature extractor, heads and checkpoints.
//! - [`dismax`]: isometric distances, logits+, probabilities and the
//!   cross-entropy term.
//! - [`fpr`]: 2×2 mosaics, fractional targets and the KL regularizer.
//! - [`scoring`]: MPS / MDS / MMLES / entropy scores and score dumps.
//! - [`calibration`]: ECE and bounded temperature search.
//! - [`evaluation`]: AUROC, AUPR, TNR@TPR95 and accuracy.
//! - [`data`]: synthetic datasets, IDX ingestion and the dataset cache.
//! - [`train`] and [`pipeline`]: the optimizer loop and the
//!   train / calibrate / evaluate / report operations.
//!
//! Data-parallel loops go through [`Exec`]; with the `parallel` feature
//! disabled every loop runs sequentially and produces identical results.

pub mod calibration;
pub mod codec;
pub mod data;
pub mod dismax;
mod error;
pub mod evaluation;
mod exec;
pub mod fpr;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod scoring;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use numerics::{Tape, Tensor, Var};
