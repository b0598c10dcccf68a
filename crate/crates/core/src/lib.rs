//! Privacy-preserving release of tabular datasets.

// `!(x > 0.0)` is deliberate: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod constrained;
pub mod correlated;
pub mod dataset;
pub mod density;
pub mod error;
pub mod harness;
pub mod iid;
pub mod learner;
pub mod privacy;
pub mod quadrature;
pub mod scaling;
pub mod stream;
pub mod svm;
pub mod synthetic;

pub use error::{Error, ErrorCategory, Result};
