//! Monte Carlo experiments over seed ensembles, their estimators and their
//! on-disk artifacts.

pub mod config;
pub mod experiments;
pub mod io;
pub mod stats;

pub use config::{CovStatistic, EnvConfig, ExperimentConfig, ExperimentKind};
pub use experiments::{run, Results, RunOutput};
pub use stats::{compute_xi, estimate_exponent, Fit, ModelParams, Summary};

use serde::{Deserialize, Serialize};

/// Outcome of one built-in acceptance check of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

/// One row of `samples.csv`. For `doob` the `n` column holds the step `k`,
/// for `appendix-phi` the atom count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRow {
    pub n: usize,
    pub replica: usize,
    pub seed: u64,
    pub values: Vec<f64>,
}

/// One row of `aggregate.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub n: usize,
    pub field: String,
    pub summary: Summary,
}
