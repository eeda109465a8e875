//! Simulation studies: data-generating processes and the experiment driver.

pub mod dgp;
pub mod experiment;

pub use dgp::{generate, pseudo_true, Auxiliary, DgpConfig, HazardModel, PseudoTrue, Sampling};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, MetricsReport, Truth};
