//! Simulation designs, error metrics and the experiment runner.

pub mod cv;
pub mod experiment;
pub mod generators;
pub mod metrics;
pub mod rng;
