//! Structure-preserving time stepping for a degenerate cross-diffusion
//! Cahn-Hilliard system on a uniform cell-centered grid.

// `!(x > 0.0)` is used on purpose so that NaN takes the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod s1;
pub mod s2;
pub mod stepper;

pub use error::{Error, Result};
