//! Hierarchical multi-agent offline reinforcement learning for multi-organ
//! treatment recommendation.
//!
//! The crate is organized around the pipeline:
//!
//! 1. [`simulator`] — synthetic multi-organ patient environment with known
//!    dynamics, used to generate behavior cohorts and score policies by true
//!    Monte Carlo value.
//! 2. [`features`] — raw event ingestion, 4-hour windowing, LOCF imputation
//!    and normalization.
//! 3. [`state_repr`] — learned dual-layer state representations (unified
//!    root-level and organ-targeted).
//! 4. [`actions`] / [`reward`] — six-treatment action model with hierarchy
//!    decomposition, and the hybrid terminal + intermediate reward.
//! 5. [`agents`] / [`training`] — the agent hierarchy (root, organ,
//!    treatment, mixture, cross-organ QMix) and the two-phase offline
//!    training procedure.
//! 6. [`ope`] — off-policy evaluation (CWPDIS), mortality estimation and
//!    qualitative curve exports.
//! 7. [`baselines`] — flat and factored D3QN / QMix comparison policies.

pub mod actions;
pub mod agents;
pub mod baselines;
pub mod features;
pub mod numerics;
pub mod ope;
pub mod persist;
pub mod reward;
pub mod simulator;
pub mod state_repr;
pub mod training;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("constraint violation: {0}")]
    Constraint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
