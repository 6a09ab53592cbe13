// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod bessel;
pub mod coeffs;
pub mod em;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod invariants;
pub mod linalg;
pub mod observation;
pub mod par;
pub mod pipeline;
pub mod runner;
pub mod solver;
pub mod spca;
pub mod stackfile;

pub use error::{Error, Result};
