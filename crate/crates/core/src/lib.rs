// `!(x > 0.0)` is used on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod flow;
pub mod imgcore;
pub mod keyframe;
pub mod pipeline;
pub mod preprocess;
pub mod register;
pub mod sfs;
pub mod synth;

pub use error::{Error, Result};
