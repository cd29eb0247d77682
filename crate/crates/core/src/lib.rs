//! Balanced truncation for linear stochastic control systems with
//! multiplicative noise, based on an LQG-type Gramian pair.

pub mod analysis;
pub mod balancing;
pub mod benchmark;
pub mod cli;
pub mod error;
pub mod io;
pub mod linalg;
pub mod operators;
pub mod simulate;
pub mod solvers;
pub mod system;

pub use error::{Error, Result};
pub use system::StochasticSystem;
