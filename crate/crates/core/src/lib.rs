// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod certify;
pub mod fixtures;
pub mod harness;
pub mod hydraulics;
pub mod linalg;
pub mod optimizer;
pub mod par;
pub mod problem;
pub mod sampling;
