// NaN-rejecting `!(x > 0.0)` checks and index-based dynamic programming loops are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod crf;
pub mod encoders;
pub mod error;
pub mod model;
pub mod moving_average;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod reduced_bias;
pub mod rhema;
pub mod verify;

pub use error::{Error, Result};
