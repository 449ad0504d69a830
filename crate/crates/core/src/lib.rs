//! Optimizer-trajectory-aware model merging toolkit.
//!
//! Fine-tuning the same base model on several tasks produces a set of expert
//! checkpoints plus, as a free by-product of Adam, per-parameter second-moment
//! statistics (`exp_avg_sq`) that act as a diagonal curvature proxy. This
//! crate implements everything needed to exploit that signal at merge time:
//!
//! - [`tensor`]: dense named tensors with elementwise/reduction/top-k/spectral
//!   kernels
//! - [`container`] / [`bundle`]: safetensors-compatible checkpoint and
//!   optimizer-state I/O
//! - [`graft`]: curvature-weighted saliency, global top-k masks, and
//!   revert-to-base grafting of task vectors
//! - [`merge`]: curvature-preconditioned aggregation plus linear, task
//!   arithmetic, Fisher-weighted, and trim/sign-elect baselines
//! - [`factor`]: rank-1 row/column-sum compression of second moments and
//!   stable-rank analysis
//! - [`analysis`]: layer densities, row/column sparsity histograms, mask
//!   overlap, and curvature heatmap grids
//! - [`trainer`]: a deterministic toy trainer that produces genuine Adam
//!   states so every formula here can be verified end to end

pub mod analysis;
pub mod bundle;
pub mod container;
pub mod error;
pub mod factor;
pub mod graft;
pub mod merge;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, NamedTensor};
