//! Nighttime single-object tracker: patch tokenisation at two scales,
//! multiscale template blending, a key-token gated transformer backbone,
//! a confidence-gated template calibrator, the prediction head and losses,
//! plus the tracking loop, trainer and synthetic sequence generator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aktg;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod mhb;
pub mod model;
pub mod nn;
pub mod ntc;
pub mod params;
pub mod patching;
pub mod synth;
pub mod tracker;
pub mod train;

pub use config::ModelConfig;
pub use error::{CoreError, Result};
pub use geometry::{BoundingBox, Frame};
pub use model::Model;
