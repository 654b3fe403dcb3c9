//! Online test-time adaptation engine.
//!
//! The engine adapts a small source-trained network to a corrupted,
//! temporally correlated test stream without labels:
//!
//! - [`net`] — a minimal differentiable feed-forward network (dense, stride-1
//!   convolution, ReLU, normalization slots) with reverse-mode gradients and
//!   an Adam optimizer;
//! - [`resibn`] — resilient normalization statistics: EMA of target
//!   statistics from test batches plus soft alignment toward the source
//!   statistics along the squared 2-Wasserstein distance;
//! - [`entrobank`] — the entropy-driven memory bank with the eviction
//!   priority outdated -> long-persisted over-confident -> highest entropy,
//!   restricted to dominant classes;
//! - [`adapter`] — teacher-student self-training over bank snapshots with
//!   weak/strong augmentation views and a teacher parameter EMA;
//! - [`stream`] — non-i.i.d. test-stream construction (Dirichlet slot
//!   sampling, label-sorted ordering) over synthetically corrupted datasets;
//! - [`checkpoint`] — portable binary formats for network checkpoints,
//!   adaptation snapshots, and datasets.

pub mod adapter;
pub mod checkpoint;
pub mod corrupt;
pub mod entrobank;
pub mod error;
pub mod net;
pub mod resibn;
pub mod stream;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
