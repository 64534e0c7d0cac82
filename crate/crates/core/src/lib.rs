//! Embedding-level "cutoff" augmentation with a cross-entropy plus
//! Jensen-Shannon consistency objective, on a tiny from-scratch transformer.
//!
//! Module map:
//! - [`tensor`]: dense tensors and reverse-mode autodiff
//! - [`embedding`]: token + position (+ segment) embedding composition
//! - [`cutoff`]: token / feature / span erasure masks and view sampling
//! - [`objective`]: cross-entropy, JS consistency and the combined loss
//! - [`models`]: encoder classifier and encoder-decoder, checkpoints
//! - [`adversarial`]: PGD-style embedding perturbation baseline
//! - [`synth_data`]: deterministic synthetic tasks
//! - [`trainer`]: schedule, Adam, pass accounting and the training loop
//! - [`experiments`]: sweeps, comparisons, metrics files and charts

pub mod adversarial;
pub mod cutoff;
pub mod embedding;
pub mod experiments;
mod error;
pub mod models;
pub mod objective;
pub mod synth_data;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub use tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
