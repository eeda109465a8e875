use thiserror::Error;

/// Errors raised while ingesting data or computing estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` must be 0 or 1, got `{value}`")]
    NonBinaryIndicator {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: sampling probability {value} outside ({sigma}, 1]")]
    ProbabilityOutOfRange { row: usize, value: f64, sigma: f64 },
    #[error("no subject has follow-up time >= tau = {0}")]
    NoSubjectAtRiskAtTau(f64),
    #[error("row {row}: {message}")]
    InvalidRecord { row: usize, message: String },
    #[error("weight scheme does not match data: {0}")]
    SchemeDataMismatch(String),
    #[error("weighted at-risk mass is zero at t = {0}")]
    ZeroRiskSet(f64),
    #[error("argument outside [0, tau]: {0}")]
    DomainError(String),
    #[error("design matrix A is singular (condition number {condition:.3e})")]
    SingularA { condition: f64 },
    #[error("calibration Hessian is not positive definite")]
    SingularSystem,
    #[error("auxiliary second-moment matrix is singular")]
    SingularAuxiliary,
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("calibration dual is unbounded: auxiliary totals are not attainable (residual {residual:.3e})")]
    UnboundedDual { residual: f64 },
    #[error("estimating-equation Jacobian is singular")]
    SingularJacobian,
    #[error("invalid configuration: {0}")]
    ConfigError(String),
    #[error("{failed} of {total} replicates failed (limit 1%); first error: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the input data or user-supplied options,
    /// as opposed to numerical breakdown.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::NonBinaryIndicator { .. }
                | Error::ProbabilityOutOfRange { .. }
                | Error::NoSubjectAtRiskAtTau(_)
                | Error::InvalidRecord { .. }
                | Error::SchemeDataMismatch(_)
                | Error::DomainError(_)
                | Error::ConfigError(_)
                | Error::Csv(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
