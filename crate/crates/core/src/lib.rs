// negated comparisons reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calib;
pub mod chain;
pub mod config;
pub mod detect;
pub mod evalx;
pub mod fusion;
pub mod pipeline;
pub mod raster;
pub mod register;
pub mod synth;
pub mod unfold;
