//! Metrics, experiment configuration and the end-to-end run harness.

pub mod config;
pub mod metrics;
pub mod run;
