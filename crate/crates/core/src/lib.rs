//! A single autoregressive sequence model over a shared discrete vocabulary
//! that can be queried both as a language-conditioned policy (instruction +
//! observations -> action chunk) and as a world model (observation + action ->
//! next observation), trained on a mixture of both sample formats in a
//! deterministic toy pick-and-place environment.
//!
//! The crate is organized along the pipeline:
//!
//! - [`engine`]: dense tensors, reverse-mode differentiation, Adam.
//! - [`tokenizer`]: shared vocabulary over text / image cells / state bins /
//!   action bins, plus the per-dimension uniform binning.
//! - [`env`]: the tabletop world, dual-view rendering, scripted expert.
//! - [`data`]: demonstration collection, preprocessing, on-disk format.
//! - [`sequence`]: tokenized training samples for both data formats.
//! - [`masks`]: the three attention regimes (causal / action-isolated /
//!   world-model) built from a sample layout.
//! - [`model`]: decoder-only trunk, continuous action head, losses, decoding.
//! - [`training`]: mixed-data training loop and two-stage pretraining.
//! - [`eval`]: rollout success rate, next-frame metrics, ablation drivers.

pub mod config;
pub mod data;
pub mod engine;
pub mod env;
pub mod error;
pub mod eval;
pub mod masks;
pub mod model;
pub mod scalar;
pub mod sequence;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision used by default everywhere outside gradient checks.
pub type TrainScalar = f32;
/// Precision reserved for finite-difference gradient verification.
pub type CheckScalar = f64;

/// Dense tensor in training precision.
pub type Tensor32 = engine::Tensor<f32>;
/// Dense tensor in verification precision.
pub type Tensor64 = engine::Tensor<f64>;
