// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod numerics;
pub mod ot;
pub mod alignment;
pub mod classifier;
pub mod trainer;
pub mod io;
pub mod cli;
