use thiserror::Error;

use crate::simulator::RolloutStats;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("matrix is not Schur stable: spectral radius {rho:.9} exceeds 1 - {margin:e}")]
    NotSchurStable { rho: f64, margin: f64 },

    #[error("input matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NonSymmetricInput { asymmetry: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("policy is not stabilizing: spectral radius of A+BK is {rho:.9}")]
    NotStabilizing { rho: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("moment undefined: {0}")]
    MomentUndefined(String),

    #[error("the spectral integral form of the asymptotic variance requires Gaussian noise")]
    RequiresGaussian,

    #[error("Lagrange multiplier must be nonnegative, got {0}")]
    NegativeMultiplier(f64),

    #[error("inner-loop iterate left the stabilizing set (spectral radius {rho:.9})")]
    LostStability { rho: f64 },

    #[error("inner loop did not reach the gradient threshold within {0} iterations")]
    MaxIterations(usize),

    #[error("problem appears infeasible (Slater's condition likely violated): {0}")]
    InfeasibleSuspected(String),

    #[error("drift condition violated at x = {x:?}: excess {excess:.4e} over the certified bound")]
    DriftViolated { x: Vec<f64>, excess: f64 },

    #[error("gust channel {channel} out of range for noise dimension {dim}")]
    ChannelOutOfRange { channel: usize, dim: usize },

    #[error("state norm {norm:.3e} exceeded the overflow guard at step {step}")]
    NumericalOverflow {
        step: usize,
        norm: f64,
        partial: Box<RolloutStats>,
    },

    #[error("singular matrix encountered in {0}")]
    Singular(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
