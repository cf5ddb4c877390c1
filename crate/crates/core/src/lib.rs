//! Multi-stage vision transformers with residual spatial reduction,
//! weight-sharing super-networks trained with multi-architectural sampling,
//! and MAC-constrained evolutionary architecture search.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`model`]: the ViT-Res architecture (conv stem, transformer blocks,
//!   residual spatial reduction, classification and token-label heads).
//! - [`supernet`]: channel masking, masked layer norm, multi-architecture
//!   forward passes and sub-network extraction.
//! - [`search`]: search spaces, gene codec, analytic cost model and the
//!   evolutionary loop.
//! - [`data`]: datasets, splits and token-labeling augmentation.
//! - [`train`]: losses, optimizer, training loops, evaluation, checkpoints.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod train;

pub use error::{Error, Result};
