//! Ergodic-risk constrained linear-quadratic control.
//!
//! The crate evaluates the ergodic-risk criteria of a linear system under an
//! affine state-feedback policy (the per-step uncertainty `C_t`, the asymptotic
//! conditional variance `gamma_N^2`, the asymptotic variance `gamma_C^2`), solves
//! the risk-constrained LQR problem with a primal-dual method whose inner loop
//! is Hewer's policy iteration, and checks the underlying limit theorems by
//! seeded Monte Carlo simulation.
//!
//! Modules, bottom up:
//! - [`matops`]: Lyapunov/Riccati solvers, spectra, spectral density.
//! - [`noise`]: Gaussian, Student-t and empirical noise with moment functionals.
//! - [`system`]: plant, policies, closed-loop quantities, average cost.
//! - [`risk`]: `C_t`, `gamma_N^2`, `gamma_C^2` estimators, CLT covariance.
//! - [`optimizer`]: Lagrangian, Riccati characterization, primal-dual solver.
//! - [`simulator`]: rollouts, ensembles, LLN/CLT/martingale checks, gusts.
//! - [`ergodicity`]: drift certificates for V-uniform ergodicity.

pub mod ergodicity;
pub mod error;
pub mod matops;
pub mod noise;
pub mod optimizer;
pub mod risk;
pub mod rng;
pub mod simulator;
pub mod system;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use noise::{MomentFunctionals, NoiseModel};
pub use risk::RiskFunctional;

pub use system::{ClosedLoop, LtiSystem, Policy, QuadraticCost};

pub use nalgebra::{DMatrix, DVector};
