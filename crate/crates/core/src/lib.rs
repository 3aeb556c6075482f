//! Measure and mitigate indiscriminate miscalibration in LLM classifiers.
//!
//! The crate is organised around a two-phase workflow: query a model once,
//! store [`orchestrator::EvaluationRun`] artifacts, then re-analyse them
//! offline with [`metrics`], [`posthoc`] and [`report`].
//!
//! ```
//! use indiscal::metrics;
//! use indiscal::model::{ConditionTag, PredictionRecord, ProbabilityEstimate};
//!
//! let records = vec![
//!     PredictionRecord::new("a", ProbabilityEstimate::new(vec![0.8, 0.2], true), 0, ConditionTag::independent(0, 1)),
//!     PredictionRecord::new("b", ProbabilityEstimate::new(vec![0.6, 0.4], true), 1, ConditionTag::independent(0, 1)),
//! ];
//! let split = metrics::macro_ce(&records).unwrap();
//! assert!((split.macro_ce.value().unwrap() - 0.4).abs() < 1e-12);
//! ```

pub mod backend;
pub mod error;
pub mod extraction;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod posthoc;
pub mod prompting;
pub mod report;
pub mod seed;
pub mod simulator;

pub use error::{Error, Result};
