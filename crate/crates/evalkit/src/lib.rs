//! Sequence I/O, one-pass evaluation metrics and reports for the
//! nighttrack tracker.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod ope;
pub mod plot;

pub use error::{EvalError, Result};
