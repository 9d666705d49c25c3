// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod tensor;
pub mod geometry;
pub mod encoding;
pub mod losses;
pub mod synth;
pub mod model;
pub mod aggregate;
pub mod train;
pub mod evaluate;
pub mod diagnostics;
