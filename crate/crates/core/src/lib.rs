//! Score-distillation gradient estimators (SDS, NFSD, DDS, VSD) run against
//! pluggable ε-predictors: exact Gaussian-mixture oracles, small trained
//! denoisers, or a remote pretrained model.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(feature = "cli")]
pub mod cli;
pub mod decompose;
pub mod digest;
pub mod distill;
pub mod engine;
pub mod error;
pub mod generators;
pub mod io;
pub mod optim;
pub mod random;
pub mod schedule;
pub mod score;
pub mod stats;
pub mod toy;

pub use error::{Error, Result};
