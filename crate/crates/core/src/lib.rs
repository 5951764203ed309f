//! Deterministic single-process simulator for fair federated learning.
//!
//! Models are linear logistic predictors trained with FedAvg-style local
//! steps while an exponentiated-gradient dual player enforces bounded group
//! loss constraints (global, conditional on the label, or minmax). The crate
//! also ships the verification oracles (duality gap, feasibility gate
//! re-evaluation, gradient checks) used by the acceptance suite.

pub mod baselines;
pub mod config;
pub mod constraints;
pub mod dataset;
pub mod dual;
pub mod error;
pub mod fed_engine;
pub mod linear_model;
pub mod metrics;
pub mod pffl;
pub mod sweep;
pub mod theory_checks;

pub use error::{FairFedError, Result};
