//! Desk-scale library for an EMA-anchored dual-path convolutional network.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`]: dense f64 tensors and the flat `MAMS` blob format.
//! - [`autograd`]: a reverse-mode tape covering exactly the ops the model needs.
//! - [`model`]: the dual-path network (backbone, expansion block, EMA branch,
//!   multi-scale fusion, classification head) with parameter/FLOP accounting.
//! - [`ema`]: the momentum branch update, its closed-form oracle, and the
//!   unrolled-gradient approximation verifier.
//! - [`loss`]: binary cross-entropy and asymmetric loss over logits.
//! - [`data`]: synthetic long-tailed multi-label images, label-CSV ingestion,
//!   splits, batching, and the positive-only stage-1 filter.
//! - [`metrics`]: per-class ROC-AUC and cross-run aggregation.
//! - [`train`]: the two-stage training loop and the 2x2 ablation runner.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ema;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
