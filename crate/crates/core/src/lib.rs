// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod fieldmath;
pub mod metrics;
pub mod model;
pub mod netcore;
pub mod synth;
pub mod training;
mod error;

pub use error::{Error, Result};
