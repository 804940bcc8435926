//! Adaptive backstepping boundary control of the linearized ARZ traffic model,
//! with a DeepONet surrogate for the backstepping kernels.

pub mod bench;
pub mod config;
pub mod control;
pub mod dataset;
pub mod deeponet;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod model;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
