//! Joint spatial modelling of count surveys collected under different
//! sampling protocols, linked through a shared Matérn Gaussian random field.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assessment;
pub mod error;
pub mod inference;
pub mod io;
pub mod mesh;
pub mod model;
pub mod predict;
pub mod sparse;
pub mod sim;
pub mod spde;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
