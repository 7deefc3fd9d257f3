//! Ex-ante fairness risk scoring for tabular data.
//!
//! The crate estimates, for every instance, how much the ground-truth
//! response depends on a binary sensitive attribute, and provides the
//! tooling to check how that score relates to downstream classifier
//! unfairness:
//!
//! * [`dataset`] loading, encoding and stratified splits
//! * [`cart`] Gini decision trees with per-group leaf statistics
//! * [`foresee`] the bagged, accuracy-filtered tree ensemble and its risk score
//! * [`baseline`] a boosted additive model scored by flipping the sensitive attribute
//! * [`classifiers`] the unaware downstream models
//! * [`fairness`] group fairness gaps and exact grid checks of the risk bounds
//! * [`synthetic`] the two-feature benchmark with known risk
//! * [`mitigation`] risk-guided pre- and post-processing
//! * [`profile`] high/low risk profiling

pub mod baseline;
pub mod cart;
pub mod classifiers;
pub mod dataset;
pub mod error;
pub mod fairness;
pub mod foresee;
pub mod mitigation;
pub mod profile;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
