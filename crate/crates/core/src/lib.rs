//! Battery state-of-health estimation from constant-voltage charge curves
//! with sparse polynomial regression.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod estimator;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod simulate;
pub mod sindy;
