//! Numerical toolkit for backward stochastic differential equations whose
//! state lives on a manifold chart.
//!
//! The crate simulates the driving diffusion, solves the coordinate BSDE
//! backward in time by regression Monte Carlo, and numerically certifies the
//! geometric inequalities (Hessian bounds, parallel-transport comparisons,
//! submartingale construction) that control uniqueness of the solutions. A
//! probabilistic Dirichlet solver builds on the random-horizon variant of
//! the same machinery.

pub mod bsde;
pub mod config;
pub mod diagnostics;
pub mod dirichlet;
pub mod error;
pub mod regression;
pub mod gauges;
pub mod sde;
pub mod geometry;
pub mod numerics;
pub mod report;

pub use error::{Error, Result};
