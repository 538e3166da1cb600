//! Soft-prompt pre-training over large class vocabularies with a sampled
//! softmax and an adaptive logit margin.

// `!(x > 0.0)` is used on purpose so NaN lands on the rejecting branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod analysis;
mod binio;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod numerics;
pub mod objective;
pub mod sampling;
pub mod training;

pub use error::{PompError, Result};
