//! Safe adaptive boundary control of a reaction-diffusion PDE feeding an ODE.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the grid formulas.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod barrier;
pub mod controller;
pub mod error;
pub mod identifier;
pub mod kernels;
pub mod linalg;
pub mod plant;
pub mod scenario;
pub mod series;
pub mod sim;

pub use error::{Error, Result};
