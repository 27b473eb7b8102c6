//! Experiment harness: configuration, task suite, pipeline stages, report
//! writers, and the prevalence scatter plot.

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod suite;
