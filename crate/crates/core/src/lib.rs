//! Estimation and inference for the additive hazards model
//! `lambda(t | Z) = lambda_0(t) + Z' theta` under random sampling and
//! two-phase designs (IPW and calibrated weights).

pub mod calibration;
pub mod data;
pub mod error;
pub mod estimators;
pub mod oracle;
pub mod parallel;
mod linalg;
pub mod risk;
pub mod simulation;
pub mod step;
pub mod variance;

pub use calibration::{solve_gamma, CalibrationSolution};
pub use data::{load_csv, CsvSchema, Dataset, SubjectRecord, WeightScheme};
pub use error::{Error, Result};
pub use estimators::{fit, CumulativeHazard, FitResult};
pub use linalg::min_eigenvalue;
pub use parallel::Execution;
pub use step::{Continuity, StepFunction};
pub use variance::{InfluenceRows, Target, VarianceEstimate, VarianceKind};
