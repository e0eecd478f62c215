//! Numerical laboratory for quantitative stochastic homogenization of
//! `-div(a(x) grad u) = f` with stationary random coefficients.
//!
//! The crate samples coefficient laws, computes subadditive energy quantities
//! and correctors by discrete variational solves, estimates the homogenized
//! matrix, checks quantitative bounds and rates, and builds white noise and
//! gradient Gaussian free fields.

pub mod analysis;
pub mod cli;
pub mod corrector;
pub mod energy;
pub mod error;
pub mod field;
pub mod gaussian;
pub mod grid;
pub mod homogenize;
pub mod linalg;
pub mod seed;
pub mod solver;
pub mod transform;
pub mod twoscale;

pub use error::{Error, Result};
