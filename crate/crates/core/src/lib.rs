//! Complementarity-guided multimodal fusion for 1D biomedical signals.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balance;
pub mod bench;
pub mod complementarity;
pub mod config;
pub mod dsp;
pub mod error;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod stats;

pub use error::{Error, Result};
