//! Simulator for differentially private synthetic text generation in
//! cross-silo federated learning.
//!
//! The pipeline has four stages: DP federated finetuning of a conditional
//! generator on strong clients, DP control-code profiling across all
//! clients, profile-guided conditional generation, and DP KNN-voting
//! refinement with weighted resampling driven by weak clients. Everything
//! is deterministic given a master seed, and every noise release is
//! recorded in a privacy ledger under basic composition.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fedtrain;
pub mod generator;
pub mod pipeline;
pub mod privacy;
pub mod profiling;
pub mod refine;
pub mod rng;
pub mod tokenizer;

pub use config::{Overrides, RunConfig};
pub use error::{Error, Result};
pub use pipeline::{run_pipeline, RunDir};
