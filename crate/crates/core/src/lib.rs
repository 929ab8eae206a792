//! Allocation-only core of a privacy-preserving synthetic training data pipeline.
//!
//! The crate has no I/O. It covers:
//!
//! * [`imaging`]: rasters, masks, canny edges, Gaussian noise.
//! * [`sanitizer`]: per-role segment sanitization into a [`sanitizer::SanitizedBundle`].
//! * [`metrics`]: normalized image mutual information and embedding similarity.
//! * [`orchestrator`]: fine-tune planning, prompt sets, placement and dataset assembly
//!   against a pluggable [`orchestrator::GenerationBackend`].
//! * [`utility`]: dataset splitting, accuracy, IoU, mAP50 and training dispatch.
//! * [`mock`]: a deterministic procedural backend for tests and offline runs.
#![no_std]
// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod backend;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod mock;
pub mod orchestrator;
pub mod sanitizer;
pub mod seed;
pub mod utility;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
