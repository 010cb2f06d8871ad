//! Decision-tree extraction from random forests for tabular cohorts, with
//! grouped cross-validation, baselines and a synthetic cohort generator.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod forest;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tree;

pub use error::{Error, Result};
pub use metrics::Label;
