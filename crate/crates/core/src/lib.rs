//! Sparse graph mixture-of-experts (GMoE) for graph neural networks.
//!
//! Every GMoE layer holds hop-1 and hop-2 message-passing experts. A noisy
//! top-k gate picks `k` of the `n` experts for each node, and importance and
//! load balance losses keep the routing from collapsing onto a single group
//! of experts. Everything is built from scratch on a small reverse-mode
//! autodiff tape over dense `f64` matrices:
//!
//! - [`numerics`]: matrices, sparse operators, special functions, the tape
//!   and a finite-difference gradient checker.
//! - [`graph`]: graphs, normalized hop-1/hop-2 neighborhoods, batching.
//! - [`experts`]: GCN- and GIN-style experts.
//! - [`gating`]: noisy top-k routing and the two balance losses.
//! - [`layer`] and [`model`]: the GMoE layer and full models, checkpoints.
//! - [`training`]: task losses, Adam, metrics, training and masked pretraining.
//! - [`flops`]: analytic and instrumented FLOPs accounting.
//! - [`datasets`]: JSON-lines I/O, synthetic generators and splits.

pub mod datasets;
pub mod error;
pub mod experts;
pub mod flops;
pub mod gating;
pub mod graph;
pub mod layer;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Matrix, ParamStore, Rng};
