use thiserror::Error;

use erlqr_core::Error as CoreError;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("random instance generation failed after {0} attempts")]
    GenerationFailed(usize),

    #[error("primal-dual solver did not converge within {0} outer iterations")]
    NotConverged(usize),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 0 success, 1 not converged or runtime failure, 2 infeasible,
    /// 3 configuration or precondition error, 4 drift condition violated.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::GenerationFailed(_) => 3,
            CliError::NotConverged(_) => 1,
            CliError::Core(e) => match e {
                CoreError::InfeasibleSuspected(_) => 2,
                CoreError::DriftViolated { .. } => 4,
                CoreError::MomentUndefined(_)
                | CoreError::DimensionMismatch(_)
                | CoreError::InvalidInput(_)
                | CoreError::NonSymmetricInput { .. }
                | CoreError::NotStabilizing { .. }
                | CoreError::NotSchurStable { .. }
                | CoreError::RequiresGaussian
                | CoreError::ChannelOutOfRange { .. }
                | CoreError::NegativeMultiplier(_) => 3,
                _ => 1,
            },
        }
    }
}
