//! Monte Carlo density estimation for Wiener functionals through Malliavin
//! calculus representation formulas, with Gaussian envelope certificates.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod density;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod models;
pub mod quadrature;
pub mod regression;
pub mod rng;
pub mod volterra;

pub use error::{Error, Result};
