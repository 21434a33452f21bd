//! Answer-position bias toolkit.
//!
//! * [`corpus`] and [`metrics`] measure position bias in multiple-choice
//!   corpora (bias score, RStd, chi-square, Fisher exact tests).
//! * [`toylm`] is a small decoder-only transformer with hidden-state capture
//!   and additive activation injection.
//! * [`probe`], [`steer`] and [`harness`] predict the answer position from
//!   stem representations and shift it with steering vectors.

pub mod corpus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod probe;
pub mod rng;
pub mod steer;
pub mod toylm;

pub use error::{Error, ErrorKind, Result};
