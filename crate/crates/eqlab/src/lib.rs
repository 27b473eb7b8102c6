//! Desk-scale lab for task-conditioned event-sequence outcome prediction.
//!
//! The pieces, bottom to top: [`synthgen`] generates synthetic patient
//! cohorts with a Monte Carlo oracle for true outcome probabilities;
//! [`eventio`] defines the on-disk event format and everything-is-code
//! tokenization; [`model`] holds two small transformers sharing one
//! tensor library — a bidirectional encoder conditioned on a prepended
//! query token, and a causal decoder baseline; [`trainer`] implements
//! query-distribution pretraining with censoring-aware masked loss plus
//! next-token training; [`inference`] provides single-pass prediction,
//! K-trajectory count estimation, and disjunctive aggregation; [`stats`]
//! carries the evaluation statistics (AUROC, rank tests, bootstrap,
//! embedding cosine groups).

pub mod eventio;
pub mod inference;
pub mod model;
pub mod stats;
pub mod synthgen;
pub mod textkv;
pub mod trainer;
