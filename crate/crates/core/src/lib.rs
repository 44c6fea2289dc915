//! Calibrated activation-reuse plans for deterministic iterative samplers.
//!
//! The pipeline is: run full-compute trajectories and record change rates
//! ([`rates`]), turn them into a binary reuse plan with quantile cuts and a
//! shadow-sequence correction ([`planner`]), then follow the plan verbatim at
//! inference time ([`scheduler`]). [`bench`] measures the result.

pub mod backbone;
pub mod bench;
pub mod cache;
pub mod error;
pub mod plan_io;
pub mod planner;
pub mod presets;
pub mod rates;
pub mod sampler;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
