//! Contract-gated evolutionary search over executable drag-surrogate pipelines.
//!
//! A [`genome::Genome`] declares a full training program (data operations,
//! model family, loss, split policy). The [`phenotype`] module turns it into a
//! runnable pipeline, the [`contract`] module gates and scores it, and
//! [`evolve`] drives an island-model search with a MAP-Elites archive,
//! non-dominated selection and failure-aware operator weighting. The
//! [`escalate`] module simulates screen-and-escalate deployment of the winner
//! and [`report`] turns run logs into lineage, trajectory and ablation data.

pub mod config;
pub mod contract;
pub mod error;
pub mod escalate;
pub mod evolve;
pub mod experiment;
pub mod genome;
pub mod linalg;
pub mod metrics;
pub mod phenotype;
pub mod report;
pub mod rng;
pub mod taskbench;

pub use error::{Error, Result};

/// Engine version recorded in provenance manifests and dataset cards.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
