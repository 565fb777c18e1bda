#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gather;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;
pub mod workbench;

pub use error::{CheckpointError, Error, Result};
