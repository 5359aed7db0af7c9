//! Continual learning for segmentation across shifting domains, driven by
//! per-parameter importance weights.
//!
//! The crate bundles a small reverse-mode autodiff engine, an encoder-decoder
//! segmentation network, importance estimation and post-processing, the
//! importance-driven training strategies, a sequential multi-domain trainer,
//! continual-learning metrics and a synthetic domain-shift benchmark.

pub mod benchmark;
mod binio;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod importance;
pub mod metrics;
pub mod network;
pub mod regularization;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use network::{ParameterStore, SegNet, SegNetConfig};
pub use tensor::Tensor;
