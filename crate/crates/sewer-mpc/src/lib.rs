//! Model predictive control for sewer networks with weir overflow
//! structures, in a deterministic variant and a chance-constrained variant
//! whose probabilistic constraints are tightened from propagated rain
//! forecast variances.

pub mod cli;
pub mod controller;
pub mod error;
pub mod network;
pub mod qp;
pub mod simulator;
pub mod stochastics;

pub use error::Error;
