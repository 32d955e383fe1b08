use std::path::PathBuf;

/// Crate-wide error type. Variants mirror the failure classes of the solver
/// and training stack so callers can map them to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Per-crystal constitutive integration did not reach the end of the step
    /// within the substep budget.
    #[error("integration failure: {0}")]
    IntegrationFailure(String),

    /// The lateral stress balance (Newton on the free deformation components)
    /// did not converge.
    #[error("balancing failure: {0}")]
    BalancingFailure(String),

    #[error("training failure: {0}")]
    TrainingFailure(String),

    /// An internal invariant was violated; indicates a bug, not bad input.
    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }

    /// True for failures of the physics solver itself (as opposed to bad
    /// configuration); the environment turns these into episode aborts.
    pub fn is_simulation_failure(&self) -> bool {
        matches!(self, Error::IntegrationFailure(_) | Error::BalancingFailure(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
