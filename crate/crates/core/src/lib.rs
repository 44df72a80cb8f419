//! Query-based multi-annotator behavior learning.
//!
//! Each annotator is a learnable query token. Queries exchange information
//! through shared self-attention, read input features through multi-head
//! cross-attention, and feed per-annotator classifiers. The crate also holds
//! the training loop, data ingestion, a synthetic annotator world with planted
//! focus regions, evaluation harnesses and attention-map export.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
mod fsio;
pub mod cli;
pub mod datahub;
pub mod evalsuite;
pub mod focusviz;
pub mod model;
pub mod trainer;
pub mod numkernel;

pub use error::{Error, Result};
