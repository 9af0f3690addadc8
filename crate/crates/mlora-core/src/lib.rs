//! Desk-scale laboratory for the MultiLoRA adapter architecture.
//!
//! A toy decoder transformer with pluggable LoRA/MultiLoRA adapter sites,
//! a deterministic reverse-mode trainer, adapter merging, and an SVD-based
//! spectral analysis suite (subspace similarity grids, singular value
//! histograms) over materialized weight update matrices.

pub mod adapters;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod model;
pub mod numlin;
pub mod pipeline;
pub mod spectral;
pub mod store;
pub mod tasks;

pub use error::{Error, Result};
pub use numlin::{DenseMatrix, Precision, Rng, SvdResult};
