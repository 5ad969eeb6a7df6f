//! Multi-modal domain alignment for misinformation detection.
//!
//! The crate is `no_std` (with `alloc`) and carries every numerical piece of
//! the training objective:
//!
//! * [`tensor`] and [`tape`]: dense double-precision tensors and a small
//!   reverse-mode gradient engine over a fixed op vocabulary.
//! * [`layers`], [`params`], [`optim`]: MLP and TextCNN layers, parameter
//!   storage, and Adam.
//! * [`kernels`], [`mmd`]: multi-bandwidth Gaussian kernels and the marginal,
//!   fused and joint (product-kernel) MMD estimators with the DG/DA
//!   inter-domain losses.
//! * [`contrastive`]: the similarity-filtered cross-modal contrastive loss.
//! * [`model`], [`train`]: encoders, classifier, combined objective and the
//!   multi-source training loop.
//! * [`data`], [`synth`]: in-memory datasets, 70/30 splits, per-domain
//!   minibatching and a synthetic multi-modal domain-shift generator.
//! * [`eval`]: accuracy, proxy A-distance and seed aggregation.
//!
//! File formats, configuration and the command line live in the `rdcm`
//! companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod layers;
pub mod mmd;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
