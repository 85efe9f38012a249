//! Collaborative filtering through interpretable taste clusters.
//!
//! The model scores user-item pairs through a shared set of taste clusters:
//! items and users affiliate sparsely with clusters, each cluster carries a
//! small set of descriptive tags, and a recommendation decomposes exactly
//! into per-cluster contributions. Alongside ranking accuracy, the crate
//! measures the quality of those cluster explanations (coverage,
//! utilization, silhouette, informativeness) against clustering baselines.

pub mod baselines;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{EcfError, Result};
