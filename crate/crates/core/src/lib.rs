//! Certified approximate probabilistic simulation relations between
//! stochastic nonlinear control systems, their reduced-order models and
//! finite abstractions, with network composition, guarantee transfer,
//! policy synthesis and Monte Carlo validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abstraction;
pub mod certification;
pub mod error;
pub mod guarantees;
pub mod linalg;
pub mod matrix_serde;
pub mod model;
pub mod network;
pub mod relations;
pub mod synthesis;

pub use error::{Error, Result};
