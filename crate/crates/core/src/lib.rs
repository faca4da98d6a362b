//! Nonparametric mixed-effect regression by penalized least squares with
//! reproducing-kernel spline bases, with smoothing and correlation parameters
//! chosen by generalized cross-validation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(feature = "cli")]
pub mod cli;
pub mod design;
mod dword;
pub mod error;
pub mod io;
pub mod kernels;
pub mod selection;
pub mod sim;
pub mod simplex;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
