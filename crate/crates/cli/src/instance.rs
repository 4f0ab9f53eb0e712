//! Seeded random problem instances.

use std::path::Path;

use erlqr_core::matops::spectral_radius;
use erlqr_core::optimizer::{lqr_solve, CocpProblem};
use erlqr_core::rng::stream_rng;
use erlqr_core::system::assert_assumptions;
use erlqr_core::{DMatrix, LtiSystem, Policy};
use log::debug;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::NoiseSpec;
use crate::error::{CliError, CliResult};

pub const MAX_ATTEMPTS: usize = 100;

/// Open-loop spectral radius range the sampled `A` is rescaled into.
pub const RHO_RANGE: (f64, f64) = (0.8, 1.3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    /// Required distance of the LQR closed loop's spectral radius from 1.
    #[serde(default = "default_margin")]
    pub stability_margin: f64,
    /// `beta_bar = beta_fraction * gamma_N^2(K_LQR)`.
    #[serde(default = "default_fraction")]
    pub beta_fraction: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
}

fn default_margin() -> f64 {
    1e-3
}

fn default_fraction() -> f64 {
    0.9
}

impl InstanceSpec {
    pub fn new(n: usize, m: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            m,
            d,
            seed,
            stability_margin: default_margin(),
            beta_fraction: default_fraction(),
            noise: NoiseSpec::default(),
        }
    }

    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.beta_fraction = fraction;
        self
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

    fn validate(&self) -> CliResult<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 {
            return Err(CliError::config("instance dimensions must be at least 1"));
        }
        if self.d < self.n {
            return Err(CliError::config(format!(
                "H is {}x{} and cannot have full row rank",
                self.n, self.d
            )));
        }
        if !(self.beta_fraction.is_finite() && self.beta_fraction > 0.0) {
            return Err(CliError::config("beta_fraction must be positive"));
        }
        if !(0.0..1.0).contains(&self.stability_margin) {
            return Err(CliError::config("stability_margin must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Standard-normal `A, B, H` with `A` rescaled to a uniform spectral radius in
/// [`RHO_RANGE`]; `Q = R = Q^c = I`. Draws are retried until the LQR problem is
/// solvable, `H` has full row rank and the standing assumptions hold.
pub fn random_instance(spec: &InstanceSpec) -> CliResult<CocpProblem> {
    spec.validate()?;
    let (n, m, d) = (spec.n, spec.m, spec.d);
    let mut rng = stream_rng(spec.seed, 0);
    for attempt in 0..MAX_ATTEMPTS {
        let mut a = normal_matrix(&mut rng, n, n);
        let b = normal_matrix(&mut rng, n, m);
        let h = normal_matrix(&mut rng, n, d);
        let target = rng.random_range(RHO_RANGE.0..RHO_RANGE.1);
        let rho = spectral_radius(&a);
        if rho < 1e-8 {
            continue;
        }
        a *= target / rho;
        let noise = spec.noise.build(d, Path::new("."))?;
        let sys = LtiSystem::new(a, b, h, noise)?;
        if !sys.h_full_row_rank() {
            debug!("attempt {attempt}: H rank deficient");
            continue;
        }
        let (q, r) = (DMatrix::identity(n, n), DMatrix::identity(m, m));
        let Ok(lqr) = lqr_solve(&sys, &q, &r) else {
            debug!("attempt {attempt}: Riccati equation has no stabilizing solution");
            continue;
        };
        if spectral_radius(&(sys.a() + sys.b() * &lqr.gain)) > 1.0 - spec.stability_margin {
            continue;
        }
        if !assert_assumptions(&sys, &Policy::linear(lqr.gain.clone())).all_pass() {
            debug!("attempt {attempt}: standing assumptions fail");
            continue;
        }
        let prob = CocpProblem::new(sys, q.clone(), r, q, 1.0)?;
        let gamma = prob.gamma_n_sq(&lqr.gain)?;
        return Ok(prob.with_beta_bar(spec.beta_fraction * gamma)?);
    }
    Err(CliError::GenerationFailed(MAX_ATTEMPTS))
}
