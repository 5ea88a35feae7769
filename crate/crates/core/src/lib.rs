//! Communication-efficient simultaneous inference for high-dimensional
//! (generalised) linear models on a simulated master–worker cluster.
//!
//! The pipeline is: a warm-started local lasso on the master, a frozen
//! nodewise inverse Hessian, `τ − 1` surrogate-likelihood rounds, one
//! de-biasing step, and a master-only multiplier bootstrap (`k-grad` or
//! `n+k-1-grad`) for the sup-norm quantile of the simultaneous band.

pub mod bootstrap;
pub mod cluster;
pub mod csl;
pub mod datagen;
pub mod error;
pub mod glm;
pub mod harness;
pub mod hetero;
pub mod nodewise;
pub mod numeric;
pub mod rng;
pub mod solver;
pub mod tuning;

pub use error::{Error, Result};
