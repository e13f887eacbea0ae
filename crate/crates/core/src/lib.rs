//! Recursive language-guided spatiotemporal graph video summarization.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`nn`], [`gradcheck`]: dense tensors, a
//!   reverse-mode tape and the differentiable layer set.
//! - [`model`]: the summarizer network and its recursive graph refinement.
//! - [`losses`]: classification, sparsity, reconstruction and diversity objectives.
//! - [`train`]: Adam, the training loop and checkpoints.
//! - [`eval`]: segmentation, knapsack keyshots, F-score, rank correlations, dominance.
//! - [`data`]: the feature container, splits and the synthetic generator.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
