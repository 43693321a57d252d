//! Model-assisted doubly-robust estimation of conditional average treatment
//! effects with a high-dimensional set of controls.
//!
//! The pipeline has four stages:
//!
//! 1. [`dataset`] loads and preprocesses `(Y, D, X, Z)` data.
//! 2. [`basis`] evaluates a weakly positive series basis `p^k(X)`.
//! 3. For every basis term `j`, [`solver`] fits a calibrated logistic
//!    propensity model and a weighted lasso outcome model, each weighted by
//!    `p_j(X)`, with penalties from [`penalty`].
//! 4. [`estimator`] combines the per-term augmented inverse propensity
//!    weighted signals into a series estimate with pointwise and uniform bands.
//!
//! [`simulation`] contains the Monte Carlo designs and the replication
//! harness used to check coverage.

pub mod basis;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod par;
pub mod penalty;
pub mod rng;
pub mod simulation;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use par::Execution;
