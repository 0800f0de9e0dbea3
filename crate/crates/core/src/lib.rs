//! Amortized Bayesian model comparison for hierarchical models.
// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

pub mod autodiff;
pub mod metrics;
pub mod oracle;
pub mod perturb;
pub mod rng;
pub mod simulators;
pub mod stats;
pub mod store;
pub mod summary;
pub mod trainer;

pub use error::{Error, Result};
