//! Hybrid data-driven surrogate of AC power flow (DC-based linear model plus Gaussian-process
//! residual correction) and a chance-constrained economic dispatch built on top of it.
//!
//! Pipeline: [`grid`] → [`powerflow`] → [`dataset`] → [`gp`] / [`hybrid`] → [`ccopf`] → [`validate`].

pub mod cases;
pub mod ccopf;
pub mod dataset;
pub mod error;
pub mod gp;
pub mod grid;
pub mod hash;
pub mod hybrid;
pub mod linalg;
pub mod optim;
pub mod powerflow;
pub mod validate;

pub use error::{Error, Result};
