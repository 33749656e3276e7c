//! Convolutional-network training stack built around three interchangeable
//! normalization layers: batch normalization, weighted-mean normalization
//! implemented with stacked depthwise convolution kernels, and normalization
//! whose statistics are produced by small learned networks.
//!
//! The crate is organized as:
//!
//! - [`tensor`] — rank-4 tensors with reverse-mode automatic differentiation
//!   on a replayable tape, plus finite-difference gradient checking.
//! - [`norm`] — the three normalization layers and the kernel-stack planner.
//! - [`model`] — the all-convolutional CIFAR-10 classifier with a pluggable
//!   normalization kind, and its binary checkpoint format.
//! - [`data`] — CIFAR-10 binary ingestion, stratified subsetting, batching.
//! - [`train`] — the SGD loop, per-epoch metrics, and CSV emission.
//! - [`stats`] — Monte Carlo vs importance-sampled mean estimation.
//! - [`checks`] — the gradient-check suite shared by tests and the CLI.

pub mod checks;
pub mod data;
pub mod error;
pub mod model;
pub mod norm;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{ParamId, ParamStore, Real, Shape4, Tape, TensorId};
