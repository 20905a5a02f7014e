//! Self attention distillation for lane detection: autodiff core, model,
//! trainer, synthetic data, post-processing and metrics.

// `!(x > y)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod spline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
