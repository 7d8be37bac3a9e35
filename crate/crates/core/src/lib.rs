//! Virtual integration on fractional product spaces, virtual linear algebra, and
//! heat-flow experiments for the multilinear Kakeya inequality.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod flow;
pub mod kakeya;
pub mod measure;
pub mod scenario;
pub mod selftest;
pub mod suite;
pub mod valgebra;
pub mod vmatrix;

pub use error::{Error, Result};
