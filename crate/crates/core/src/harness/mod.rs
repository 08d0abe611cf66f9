//! Configuration, experiment orchestration and reporting.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{RunConfig, Variant};
pub use report::MetricReport;
