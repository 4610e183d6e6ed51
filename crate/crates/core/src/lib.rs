//! Domain-generalization training for multi-source classification.
//!
//! The crate bundles a small reverse-mode autodiff engine, a dense
//! feature extractor with a logit head, the contrastive invariance and
//! Mahalanobis alignment losses, the meta-train/meta-test training loop,
//! data provisioning (synthetic domains and VOC crop ingestion), and a
//! leave-one-domain-out evaluation harness.

// `!(x > 0.0)` is used on purpose so NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod data;
pub mod dg_stats;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;
