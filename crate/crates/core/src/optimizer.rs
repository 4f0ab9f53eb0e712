//! Ergodic-risk constrained LQR
//!
//! `min_K J(K)  s.t.  gamma_N^2(K) <= beta_bar` over stabilizing linear gains,
//! with `R^c = 0` and no offset. With `W = Q^c H Sigma_W H^T Q^c` the
//! Lagrangian is `L(K, lambda) = tr((Q_K + 4 lambda W) Sigma_K) - lambda beta`,
//! `beta = 4 tr((Q^c H Sigma_W H^T)^2) - m_4 + beta_bar`, so for fixed `lambda`
//! the inner problem is an LQR with state weight `Q + 4 lambda W`.

use log::{debug, info};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{
    is_positive_definite, min_eigenvalue, require_symmetric, riccati_gain, solve_dare, solve_dlyap,
    spectral_radius, symmetrize, DEFAULT_STABILITY_MARGIN,
};
use crate::risk::RiskFunctional;
use crate::system::{is_stabilizing, LtiSystem};

#[derive(Debug, Clone)]
pub struct CocpProblem {
    pub sys: LtiSystem,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub rf: RiskFunctional,
    pub beta_bar: f64,
    input_cov: DMatrix<f64>,
    weighted_input: DMatrix<f64>,
    /// `tr((Q^c H Sigma_W H^T)^2)`.
    trace_sq: f64,
    m4: f64,
}

impl CocpProblem {
    pub fn new(sys: LtiSystem, q: DMatrix<f64>, r: DMatrix<f64>, qc: DMatrix<f64>, beta_bar: f64) -> Result<Self> {
        let (n, m) = (sys.n(), sys.m());
        if q.shape() != (n, n) || r.shape() != (m, m) || qc.shape() != (n, n) {
            return Err(Error::dims(format!("expected Q, Q^c {n}x{n} and R {m}x{m}")));
        }
        require_symmetric(&q, 1e-10)?;
        require_symmetric(&r, 1e-10)?;
        if !is_positive_definite(&q) || !is_positive_definite(&r) {
            return Err(Error::invalid("Q and R must be positive definite"));
        }
        if !sys.h_full_row_rank() {
            return Err(Error::invalid("H must have full row rank"));
        }
        if !(beta_bar.is_finite() && beta_bar > 0.0) {
            return Err(Error::invalid(format!("risk budget must be positive, got {beta_bar}")));
        }
        let rf = RiskFunctional::state_only(qc, m)?;
        let input_cov = sys.input_covariance();
        let qs = &rf.qc * &input_cov;
        let weighted_input = symmetrize(&(&qs * &rf.qc));
        let trace_sq = (&qs * &qs).trace();
        let m4 = sys.noise().m4_functional(&rf.qc, sys.h())?.value;
        Ok(Self {
            q: symmetrize(&q),
            r: symmetrize(&r),
            sys,
            rf,
            beta_bar,
            input_cov,
            weighted_input,
            trace_sq,
            m4,
        })
    }

    pub fn with_beta_bar(&self, beta_bar: f64) -> Result<Self> {
        if !(beta_bar.is_finite() && beta_bar > 0.0) {
            return Err(Error::invalid(format!("risk budget must be positive, got {beta_bar}")));
        }
        Ok(Self {
            beta_bar,
            ..self.clone()
        })
    }

    pub fn n(&self) -> usize {
        self.sys.n()
    }

    pub fn m(&self) -> usize {
        self.sys.m()
    }

    pub fn m4(&self) -> f64 {
        self.m4
    }

    /// `Q^c H Sigma_W H^T Q^c`.
    pub fn weighted_input(&self) -> &DMatrix<f64> {
        &self.weighted_input
    }

    /// `beta(Q^c) = 4 tr((Q^c H Sigma_W H^T)^2) - m_4 + beta_bar`.
    pub fn beta(&self) -> f64 {
        4.0 * self.trace_sq - self.m4 + self.beta_bar
    }

    /// `Q + 4 lambda Q^c H Sigma_W H^T Q^c`.
    pub fn augmented_q(&self, lambda: f64) -> DMatrix<f64> {
        symmetrize(&(&self.q + &self.weighted_input * (4.0 * lambda)))
    }

    fn closed_loop(&self, gain: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if gain.shape() != (self.m(), self.n()) {
            return Err(Error::dims(format!("gain must be {}x{}", self.m(), self.n())));
        }
        let a_k = self.sys.a() + self.sys.b() * gain;
        let rho = spectral_radius(&a_k);
        if !(rho.is_finite() && rho <= 1.0 - DEFAULT_STABILITY_MARGIN) {
            return Err(Error::NotStabilizing { rho });
        }
        let sigma = solve_dlyap(&a_k, &self.input_cov)?;
        Ok((a_k, sigma))
    }

    fn gamma_from_sigma(&self, sigma: &DMatrix<f64>) -> Result<f64> {
        let raw = 4.0 * (&self.weighted_input * sigma).trace() - 4.0 * self.trace_sq + self.m4;
        let scale = 1.0_f64.max(4.0 * (&self.weighted_input * sigma).trace() + self.m4.abs());
        if raw >= 0.0 {
            Ok(raw)
        } else if raw >= -1e-10 * scale {
            Ok(0.0)
        } else {
            Err(Error::invalid(format!("gamma_N^2 evaluated to {raw:e}")))
        }
    }

    /// `gamma_N^2(K)`.
    pub fn gamma_n_sq(&self, gain: &DMatrix<f64>) -> Result<f64> {
        let (_, sigma) = self.closed_loop(gain)?;
        self.gamma_from_sigma(&sigma)
    }

    /// `J(K) = tr(Q_K Sigma_K)`.
    pub fn cost(&self, gain: &DMatrix<f64>) -> Result<f64> {
        let (_, sigma) = self.closed_loop(gain)?;
        Ok((self.q_k(gain) * sigma).trace())
    }

    fn q_k(&self, gain: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(&self.q + gain.transpose() * &self.r * gain))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSolution {
    pub gain: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// `tr(P H Sigma_W H^T)`.
    pub cost: f64,
}

pub fn lqr_solve(sys: &LtiSystem, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrSolution> {
    let p = solve_dare(sys.a(), sys.b(), q, r)?;
    let gain = riccati_gain(sys.a(), sys.b(), r, &p)?;
    let cost = (&p * sys.input_covariance()).trace();
    Ok(LqrSolution { gain, p, cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianEval {
    pub value: f64,
    pub gradient: DMatrix<f64>,
    /// `P = A_K^T P A_K + Q_K + 4 lambda W`.
    pub p: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub j: f64,
    pub gamma_n: f64,
}

impl LagrangianEval {
    /// `J + lambda (gamma_N^2 - beta_bar)`, the identity the trace formula must satisfy.
    pub fn identity_value(&self, lambda: f64, beta_bar: f64) -> f64 {
        self.j + lambda * (self.gamma_n - beta_bar)
    }
}

fn require_multiplier(lambda: f64) -> Result<()> {
    if lambda.is_nan() || lambda < 0.0 {
        Err(Error::NegativeMultiplier(lambda))
    } else {
        Ok(())
    }
}

/// Value, gradient `2 (R K + B^T P A_K) Sigma_K` and intermediates of `L(K, lambda)`.
pub fn lagrangian(prob: &CocpProblem, gain: &DMatrix<f64>, lambda: f64) -> Result<LagrangianEval> {
    require_multiplier(lambda)?;
    let (a_k, sigma) = prob.closed_loop(gain)?;
    let q_k = prob.q_k(gain);
    let weight = symmetrize(&(&q_k + prob.weighted_input() * (4.0 * lambda)));
    let p = solve_dlyap(&a_k.transpose(), &weight)?;
    let value = (&weight * &sigma).trace() - lambda * prob.beta();
    let gradient = (&prob.r * gain + prob.sys.b().transpose() * &p * &a_k) * &sigma * 2.0;
    let j = (&q_k * &sigma).trace();
    let gamma_n = prob.gamma_from_sigma(&sigma)?;
    Ok(LagrangianEval {
        value,
        gradient,
        p,
        sigma,
        j,
        gamma_n,
    })
}

/// `K*(lambda)`, the unique minimizer of `L(., lambda)`, from the DARE with
/// state weight `Q + 4 lambda W`.
pub fn riccati_policy(prob: &CocpProblem, lambda: f64) -> Result<DMatrix<f64>> {
    require_multiplier(lambda)?;
    let p = solve_dare(prob.sys.a(), prob.sys.b(), &prob.augmented_q(lambda), &prob.r)?;
    riccati_gain(prob.sys.a(), prob.sys.b(), &prob.r, &p)
}

/// `g(lambda) = L(K*(lambda), lambda)`.
pub fn dual_function(prob: &CocpProblem, lambda: f64) -> Result<f64> {
    let k = riccati_policy(prob, lambda)?;
    Ok(lagrangian(prob, &k, lambda)?.value)
}

pub const INNER_MAX_ITERATIONS: usize = 50;

/// Relative size of the multiplier used to confirm a persistent constraint violation.
pub const INFEASIBILITY_PROBE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerReport {
    pub gain: DMatrix<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Largest `||K + G/2 - (-(R + B^T P B)^{-1} B^T P A)||_F / max(1, ||K||_F)`
    /// over the updates taken.
    pub collapse_residual: f64,
}

/// Hewer's policy iteration on `L(., lambda)` until `||grad||_F < sqrt(eps)`.
///
/// Each step is `K <- K + G/2` with `G = -(R + B^T P B)^{-1} grad Sigma_K^{-1}`,
/// which equals `-(R + B^T P B)^{-1} B^T P A`; the latter is applied.
pub fn hewer_inner_loop(prob: &CocpProblem, lambda: f64, k_init: &DMatrix<f64>, eps: f64) -> Result<InnerReport> {
    hewer_with_limit(prob, lambda, k_init, eps, INNER_MAX_ITERATIONS)
}

pub fn hewer_with_limit(
    prob: &CocpProblem,
    lambda: f64,
    k_init: &DMatrix<f64>,
    eps: f64,
    max_iterations: usize,
) -> Result<InnerReport> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("inner tolerance must be positive"));
    }
    let threshold = eps.sqrt();
    let mut gain = k_init.clone();
    let mut collapse_residual: f64 = 0.0;
    let (a, b) = (prob.sys.a(), prob.sys.b());
    for it in 0..=max_iterations {
        let eval = match lagrangian(prob, &gain, lambda) {
            Err(Error::NotStabilizing { rho }) if it > 0 => return Err(Error::LostStability { rho }),
            other => other?,
        };
        let grad_norm = eval.gradient.norm();
        if grad_norm < threshold {
            return Ok(InnerReport {
                gain,
                iterations: it,
                grad_norm,
                collapse_residual,
            });
        }
        if it == max_iterations {
            break;
        }
        let g_mat = symmetrize(&(&prob.r + b.transpose() * &eval.p * b));
        let chol = g_mat.clone().cholesky().ok_or(Error::Singular("Hewer step"))?;
        let next = -chol.solve(&(b.transpose() * &eval.p * a));
        let sigma_inv = eval
            .sigma
            .clone()
            .try_inverse()
            .ok_or(Error::Singular("stationary covariance"))?;
        let step = -chol.solve(&eval.gradient) * sigma_inv;
        let literal = &gain + step * 0.5;
        collapse_residual = collapse_residual.max((&literal - &next).norm() / gain.norm().max(1.0));
        gain = next;
    }
    Err(Error::MaxIterations(max_iterations))
}

/// Plain gradient descent with backtracking on `L(., lambda)`; far slower than
/// [`hewer_inner_loop`].
pub fn gradient_descent_inner_loop(
    prob: &CocpProblem,
    lambda: f64,
    k_init: &DMatrix<f64>,
    eps: f64,
    max_iterations: usize,
) -> Result<InnerReport> {
    let threshold = eps.sqrt();
    let mut gain = k_init.clone();
    let mut eval = lagrangian(prob, &gain, lambda)?;
    let mut step = 1.0 / eval.gradient.norm().max(1.0);
    for it in 0..max_iterations {
        let grad_norm = eval.gradient.norm();
        if grad_norm < threshold {
            return Ok(InnerReport {
                gain,
                iterations: it,
                grad_norm,
                collapse_residual: 0.0,
            });
        }
        step *= 2.0;
        loop {
            let cand = &gain - &eval.gradient * step;
            if let Ok(next) = lagrangian(prob, &cand, lambda) {
                if next.value <= eval.value - 0.5 * step * grad_norm * grad_norm {
                    gain = cand;
                    eval = next;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-300 {
                return Err(Error::NoConvergence {
                    what: "gradient-descent line search",
                    iterations: it,
                });
            }
        }
    }
    Err(Error::MaxIterations(max_iterations))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    Hewer,
    GradientDescent { max_iterations: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Stationarity threshold is `sqrt(eps)`.
    pub eps: f64,
    /// Outer iterations; default `min(1/eps^2, 1e5)`.
    pub t_max: Option<usize>,
    /// Inner-loop tolerance, `eps` if unset.
    pub inner_eps: Option<f64>,
    /// Default `1e-6 max(1, beta_bar)`.
    pub cs_tol: Option<f64>,
    pub feas_tol: Option<f64>,
    pub lambda0: f64,
    /// Outer iterations of uninterrupted constraint violation after which
    /// feasibility is probed.
    pub patience: usize,
    pub inner: InnerMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            t_max: None,
            inner_eps: None,
            cs_tol: None,
            feas_tol: None,
            lambda0: 1.0,
            patience: 200,
            inner: InnerMethod::Hewer,
        }
    }
}

impl SolverConfig {
    pub fn t_max(&self) -> usize {
        self.t_max
            .unwrap_or_else(|| (1.0 / (self.eps * self.eps)).min(1e5) as usize)
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub m: usize,
    pub lambda: f64,
    pub grad_norm: f64,
    pub cs: f64,
    pub feas_gap: f64,
    pub j: f64,
    pub gamma_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktErrors {
    pub stationarity: f64,
    pub cs: f64,
    pub feasibility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub gain: DMatrix<f64>,
    pub lambda_avg: f64,
    /// Multiplier at which the final gain was computed.
    pub lambda_last: f64,
    pub iterations: usize,
    pub history: Vec<HistoryRow>,
    pub converged: bool,
    pub cost: f64,
    pub gamma_n: f64,
    pub kkt_last: KktErrors,
    pub kkt_avg: KktErrors,
}

/// `(||grad L_lambda(K)||_F, lambda (gamma_N^2(K) - beta_bar), max(0, gamma_N^2(K) - beta_bar))`.
pub fn kkt_errors(prob: &CocpProblem, gain: &DMatrix<f64>, lambda: f64) -> Result<KktErrors> {
    let eval = lagrangian(prob, gain, lambda)?;
    let gap = eval.gamma_n - prob.beta_bar;
    Ok(KktErrors {
        stationarity: eval.gradient.norm(),
        cs: lambda * gap,
        feasibility: gap.max(0.0),
    })
}

fn inner(prob: &CocpProblem, lambda: f64, k: &DMatrix<f64>, cfg: &SolverConfig) -> Result<InnerReport> {
    let eps = cfg.inner_eps.unwrap_or(cfg.eps);
    match cfg.inner {
        InnerMethod::Hewer => hewer_inner_loop(prob, lambda, k, eps),
        InnerMethod::GradientDescent { max_iterations } => {
            gradient_descent_inner_loop(prob, lambda, k, eps, max_iterations)
        }
    }
}

/// Primal-dual method: Hewer inner loop at the current multiplier, then
/// projected dual ascent `lambda <- max(0, lambda + eta_m (gamma_N^2(K) - beta_bar))`
/// with `eta_m = |gamma_N^2(K_0) - beta_bar|^{-1} (m + 1)^{-1/2}`.
pub fn primal_dual_solve(prob: &CocpProblem, k0: &DMatrix<f64>, cfg: &SolverConfig) -> Result<SolveReport> {
    if !is_stabilizing(&prob.sys, k0) {
        let rho = spectral_radius(&(prob.sys.a() + prob.sys.b() * k0));
        return Err(Error::NotStabilizing { rho });
    }
    require_multiplier(cfg.lambda0)?;
    let beta_bar = prob.beta_bar;
    let gamma0 = prob.gamma_n_sq(k0)?;
    let scale = beta_bar.max(1.0);
    if (gamma0 - beta_bar).abs() <= 1e-12 * scale {
        return Err(Error::invalid(
            "risk budget equals gamma_N^2(K_0); the dual step size is undefined",
        ));
    }
    if beta_bar < prob.m4() {
        return Err(Error::InfeasibleSuspected(format!(
            "budget {beta_bar:.6e} is below m_4 = {:.6e}, a lower bound of gamma_N^2 over all gains",
            prob.m4()
        )));
    }
    let cs_tol = cfg.cs_tol.unwrap_or(1e-6 * scale);
    let feas_tol = cfg.feas_tol.unwrap_or(1e-6 * scale);
    let threshold = cfg.eps.sqrt();
    let eta0 = 1.0 / (gamma0 - beta_bar).abs();
    let t_max = cfg.t_max();

    let mut lambda = cfg.lambda0;
    let mut lambda_sum = 0.0;
    let mut gain = k0.clone();
    let mut history: Vec<HistoryRow> = Vec::new();
    let mut converged = false;
    let mut probed = false;
    for m in 0..t_max {
        let inner_rep = inner(prob, lambda, &gain, cfg)?;
        gain = inner_rep.gain;
        let eval = lagrangian(prob, &gain, lambda)?;
        let gap = eval.gamma_n - beta_bar;
        let row = HistoryRow {
            m,
            lambda,
            grad_norm: eval.gradient.norm(),
            cs: lambda * gap,
            feas_gap: gap,
            j: eval.j,
            gamma_n: eval.gamma_n,
        };
        debug!("outer {m}: {row:?}");
        lambda_sum += lambda;
        history.push(row.clone());
        if row.grad_norm < threshold && row.cs.abs() <= cs_tol && gap.max(0.0) <= feas_tol {
            converged = true;
            break;
        }
        if !probed && m >= cfg.patience && gap > 0.0 {
            let past = &history[m - cfg.patience];
            let persistent = history[m - cfg.patience..].iter().all(|r| r.feas_gap > 0.0);
            if persistent && lambda > past.lambda {
                // gamma_N^2(K*(lambda)) is nonincreasing in lambda; a very large
                // multiplier shows whether the budget is reachable at all
                probed = true;
                let probe = INFEASIBILITY_PROBE * lambda.max(1.0);
                let floor = prob.gamma_n_sq(&riccati_policy(prob, probe)?)?;
                if floor > beta_bar {
                    return Err(Error::InfeasibleSuspected(format!(
                        "the constraint stayed violated for {} iterations while lambda rose from {:.4e} to {lambda:.4e}; \
                         gamma_N^2(K*({probe:.1e})) = {floor:.6e} exceeds the budget",
                        cfg.patience, past.lambda
                    )));
                }
            }
        }
        let eta = eta0 / ((m + 1) as f64).sqrt();
        lambda = (lambda + eta * gap).max(0.0);
    }
    let iterations = history.len();
    let lambda_last = history.last().expect("t_max >= 1").lambda;
    let lambda_avg = lambda_sum / iterations as f64;
    let kkt_last = kkt_errors(prob, &gain, lambda_last)?;
    let kkt_avg = kkt_errors(prob, &gain, lambda_avg)?;
    let last = history.last().expect("t_max >= 1");
    info!(
        "primal-dual finished after {iterations} iterations (converged: {converged}, lambda {lambda_last:.6e})"
    );
    Ok(SolveReport {
        cost: last.j,
        gamma_n: last.gamma_n,
        gain,
        lambda_avg,
        lambda_last,
        iterations,
        history,
        converged,
        kkt_last,
        kkt_avg,
    })
}

/// Multiplier `lambda_hat` with `gamma_N^2(K*(lambda_hat)) = beta_bar`, found by
/// bracketing and bisection on the monotone map `lambda -> gamma_N^2(K*(lambda))`.
/// `Some(0)` when the LQR gain is already feasible, `None` when no bracket
/// exists below `lambda_max`.
pub fn dual_bisection(prob: &CocpProblem, lambda_max: f64, rel_tol: f64) -> Result<Option<f64>> {
    let gap = |lambda: f64| -> Result<f64> {
        let k = riccati_policy(prob, lambda)?;
        Ok(prob.gamma_n_sq(&k)? - prob.beta_bar)
    };
    if gap(0.0)? <= 0.0 {
        return Ok(Some(0.0));
    }
    let mut lo = 0.0;
    let mut hi = 1e-3;
    while gap(hi)? > 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > lambda_max {
            return Ok(None);
        }
    }
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if gap(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Smallest eigenvalue of `Q^c`; zero means some directions carry no risk.
pub fn risk_weight_floor(prob: &CocpProblem) -> f64 {
    min_eigenvalue(&prob.rf.qc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseModel;
    use crate::risk::gamma_n_sq;
    use crate::system::{average_cost, Policy};
    use crate::testutil::{random_matrix, rng};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn random_problem(seed: u64, fraction: f64) -> CocpProblem {
        let mut r = rng(seed);
        let (n, m) = (4, 2);
        let mut a = random_matrix(&mut r, n, n);
        let rho = spectral_radius(&a);
        a *= 1.05 / rho;
        let b = random_matrix(&mut r, n, m);
        let h = random_matrix(&mut r, n, n);
        let sys = LtiSystem::new(a, b, h, NoiseModel::gaussian(DMatrix::identity(n, n)).unwrap()).unwrap();
        let probe = CocpProblem::new(sys, DMatrix::identity(n, n), DMatrix::identity(m, m), DMatrix::identity(n, n), 1.0).unwrap();
        let k = lqr_solve(&probe.sys, &probe.q, &probe.r).unwrap().gain;
        let g = probe.gamma_n_sq(&k).unwrap();
        probe.with_beta_bar(fraction * g).unwrap()
    }

    /// First instance from `seed` upward whose budget lies well above the infimum.
    fn feasible_problem(seed: u64, fraction: f64) -> CocpProblem {
        (seed..seed + 100)
            .map(|s| random_problem(s, fraction))
            .find(|p| {
                let floor = p.gamma_n_sq(&riccati_policy(p, 1e7).unwrap()).unwrap();
                floor < 0.9 * p.beta_bar
            })
            .expect("a feasible instance")
    }

    fn scalar_problem(beta_bar: f64) -> CocpProblem {
        let sys = LtiSystem::new(scalar(1.0), scalar(1.0), scalar(1.0), NoiseModel::gaussian(scalar(1.0)).unwrap()).unwrap();
        CocpProblem::new(sys, scalar(1.0), scalar(1.0), scalar(1.0), beta_bar).unwrap()
    }

    #[test]
    fn golden_ratio_lqr() {
        let prob = scalar_problem(10.0);
        let sol = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sol.p[(0, 0)] - phi).abs() < 1e-10);
        assert!((sol.gain[(0, 0)] + 0.6180339887).abs() < 1e-9);
        assert!((sol.cost - phi).abs() < 1e-10);
    }

    #[test]
    fn lqr_with_zero_input_matrix() {
        let sys = LtiSystem::new(scalar(0.5), scalar(0.0), scalar(1.0), NoiseModel::gaussian(scalar(1.0)).unwrap()).unwrap();
        let sol = lqr_solve(&sys, &scalar(1.0), &scalar(1.0)).unwrap();
        let p = 1.0 / (1.0 - 0.25);
        assert!((sol.cost - p).abs() < 1e-10);
    }

    #[test]
    fn lqr_is_stationary_and_matches_cost() {
        for seed in 0..5 {
            let prob = random_problem(100 + seed, 0.9);
            let sol = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap();
            let eval = lagrangian(&prob, &sol.gain, 0.0).unwrap();
            assert!(eval.gradient.norm() <= 1e-7, "{}", eval.gradient.norm());
            assert!((eval.j - sol.cost).abs() <= 1e-8 * sol.cost);
            assert!((eval.value - eval.j).abs() <= 1e-12 * eval.j);
            let j = average_cost(&prob.sys, &prob.q, &prob.r, &Policy::linear(sol.gain.clone())).unwrap();
            assert!((j - sol.cost).abs() <= 1e-8 * j);
        }
    }

    #[test]
    fn gamma_matches_risk_module() {
        let prob = random_problem(110, 0.9);
        let k = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap().gain;
        let direct = prob.gamma_n_sq(&k).unwrap();
        let via_risk = gamma_n_sq(&prob.sys, &Policy::linear(k), &prob.rf).unwrap();
        assert!((direct - via_risk).abs() <= 1e-10 * direct);
    }

    #[test]
    fn lagrangian_identity_and_gradient() {
        let mut r = rng(111);
        for seed in 0..5 {
            let prob = random_problem(120 + seed, 0.9);
            let k0 = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap().gain;
            let k = &k0 + random_matrix(&mut r, 2, 4) * 0.01;
            for lambda in [0.0, 0.5, 2.0] {
                let eval = lagrangian(&prob, &k, lambda).unwrap();
                let id = eval.identity_value(lambda, prob.beta_bar);
                assert!((eval.value - id).abs() <= 1e-10 * id.abs().max(1.0), "{} vs {id}", eval.value);
                let h = 1e-5;
                let mut fd = DMatrix::zeros(2, 4);
                for i in 0..2 {
                    for j in 0..4 {
                        let mut kp = k.clone();
                        kp[(i, j)] += h;
                        let mut km = k.clone();
                        km[(i, j)] -= h;
                        fd[(i, j)] = (lagrangian(&prob, &kp, lambda).unwrap().value
                            - lagrangian(&prob, &km, lambda).unwrap().value)
                            / (2.0 * h);
                    }
                }
                let rel = (&fd - &eval.gradient).norm() / eval.gradient.norm();
                assert!(rel <= 1e-6, "relative gradient error {rel}");
            }
        }
    }

    #[test]
    fn lagrangian_errors() {
        let prob = scalar_problem(10.0);
        assert!(matches!(lagrangian(&prob, &scalar(-0.5), -1.0), Err(Error::NegativeMultiplier(_))));
        assert!(matches!(lagrangian(&prob, &scalar(0.5), 1.0), Err(Error::NotStabilizing { .. })));
    }

    #[test]
    fn riccati_policy_reduces_to_lqr_and_is_stationary() {
        let prob = random_problem(130, 0.9);
        let lqr = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap();
        assert!((riccati_policy(&prob, 0.0).unwrap() - &lqr.gain).norm() <= 1e-8);
        for lambda in [0.1, 1.0, 10.0] {
            let k = riccati_policy(&prob, lambda).unwrap();
            let g = lagrangian(&prob, &k, lambda).unwrap().gradient.norm();
            assert!(g <= 1e-7, "{g}");
        }
    }

    #[test]
    fn scalar_riccati_policy_matches_augmented_dare() {
        // q~ = 1 + 4 lambda; scalar DARE p = q~ + p - p^2/(1+p)  =>  p^2 - q~ p - q~ = 0
        let prob = scalar_problem(10.0);
        for lambda in [0.0, 1.0, 100.0] {
            let qt: f64 = 1.0 + 4.0 * lambda;
            let p = (qt + (qt * qt + 4.0 * qt).sqrt()) / 2.0;
            let k = riccati_policy(&prob, lambda).unwrap();
            assert!((k[(0, 0)] + p / (1.0 + p)).abs() < 1e-9);
        }
        // the gain approaches deadbeat as lambda grows
        assert!((riccati_policy(&prob, 1e6).unwrap()[(0, 0)] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn dual_monotonicity_and_concavity() {
        let prob = random_problem(140, 0.9);
        let grid: Vec<f64> = (0..20).map(|i| 0.05 * i as f64 * i as f64).collect();
        let mut prev: Option<(f64, f64)> = None;
        for &l in &grid {
            let k = riccati_policy(&prob, l).unwrap();
            let (g, j) = (prob.gamma_n_sq(&k).unwrap(), prob.cost(&k).unwrap());
            if let Some((pg, pj)) = prev {
                assert!(g <= pg * (1.0 + 1e-9) && j >= pj * (1.0 - 1e-9));
            }
            prev = Some((g, j));
        }
        for w in grid.windows(2) {
            let mid = dual_function(&prob, 0.5 * (w[0] + w[1])).unwrap();
            let avg = 0.5 * (dual_function(&prob, w[0]).unwrap() + dual_function(&prob, w[1]).unwrap());
            assert!(mid >= avg - 1e-8 * avg.abs().max(1.0));
        }
    }

    #[test]
    fn hewer_collapse_and_quadratic_rate() {
        let prob = random_problem(150, 0.9);
        let k0 = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap().gain;
        let rep = hewer_inner_loop(&prob, 1.0, &k0, 1e-10).unwrap();
        assert!(rep.collapse_residual <= 1e-10, "{}", rep.collapse_residual);
        assert!(rep.grad_norm < 1e-5);
        assert!((&rep.gain - riccati_policy(&prob, 1.0).unwrap()).norm() <= 1e-6);
        // gradient norms along the iterates shrink superlinearly
        let mut norms = Vec::new();
        let mut k = k0.clone();
        for _ in 0..6 {
            let eval = lagrangian(&prob, &k, 1.0).unwrap();
            norms.push(eval.gradient.norm());
            if eval.gradient.norm() < 1e-9 {
                break;
            }
            k = hewer_with_limit(&prob, 1.0, &k, 1e-300, 1).map(|r| r.gain).or_else(|e| match e {
                Error::MaxIterations(_) => Ok::<_, Error>(riccati_gain(prob.sys.a(), prob.sys.b(), &prob.r, &eval.p).unwrap()),
                other => Err(other),
            }).unwrap();
        }
        // once below one the norm is squared up to a constant, down to round-off
        let mut squared = 0;
        for w in norms.windows(2) {
            if w[0] < 1.0 && w[1] > 1e-10 {
                assert!(w[1] <= 10.0 * w[0] * w[0], "{norms:?}");
                squared += 1;
            }
        }
        assert!(squared >= 1 && *norms.last().unwrap() < 1e-8, "{norms:?}");
        // starting at the optimum takes no step
        let opt = riccati_policy(&prob, 1.0).unwrap();
        assert_eq!(hewer_inner_loop(&prob, 1.0, &opt, 1e-8).unwrap().iterations, 0);
    }

    #[test]
    fn gradient_descent_agrees_with_hewer() {
        let prob = random_problem(151, 0.9);
        let k0 = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap().gain;
        let gd = gradient_descent_inner_loop(&prob, 0.5, &k0, 1e-8, 200_000).unwrap();
        let hw = riccati_policy(&prob, 0.5).unwrap();
        assert!((gd.gain - hw).norm() <= 1e-3);
    }

    #[test]
    fn kkt_pins() {
        let prob = random_problem(160, 1.5);
        let k = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap().gain;
        let e = kkt_errors(&prob, &k, 0.0).unwrap();
        assert!(e.stationarity <= 1e-7 && e.cs == 0.0 && e.feasibility == 0.0);
        let tight = prob.with_beta_bar(0.5 * prob.beta_bar).unwrap();
        assert_eq!(kkt_errors(&tight, &k, 0.0).unwrap().cs, 0.0);
        let prob = feasible_problem(160, 0.9);
        let lam = dual_bisection(&prob, 1e8, 1e-12).unwrap().unwrap();
        let k = riccati_policy(&prob, lam).unwrap();
        assert!(kkt_errors(&prob, &k, lam).unwrap().cs.abs() <= 1e-6 * prob.beta_bar.max(1.0));
    }

    #[test]
    fn primal_dual_converges_and_matches_bisection() {
        let prob = feasible_problem(170, 0.9);
        let k0 = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap().gain;
        let rep = primal_dual_solve(&prob, &k0, &SolverConfig::default()).unwrap();
        assert!(rep.converged, "{:?}", rep.history.last());
        assert!(rep.gamma_n <= prob.beta_bar * (1.0 + 1e-6));
        let lam = dual_bisection(&prob, 1e8, 1e-12).unwrap().unwrap();
        assert!((rep.lambda_last - lam).abs() <= 0.05 * lam);
        assert_eq!(rep.history.len(), rep.iterations);
    }

    #[test]
    fn feasible_lqr_gives_zero_multiplier() {
        let prob = random_problem(171, 1.0);
        let k0 = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap().gain;
        // budget exactly at gamma_N^2(K_LQR) is degenerate for the step size
        assert!(matches!(primal_dual_solve(&prob, &k0, &SolverConfig::default()), Err(Error::InvalidInput(_))));
        let prob = prob.with_beta_bar(prob.beta_bar * (1.0 + 1e-6)).unwrap();
        let rep = primal_dual_solve(&prob, &k0, &SolverConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.lambda_last < 1e-3, "{}", rep.lambda_last);
        assert!((&rep.gain - &k0).norm() <= 1e-2 * k0.norm());
    }

    #[test]
    fn infeasible_budgets_are_detected() {
        // scalar: gamma_N^2(k) = 4 (1+k)^2 / (1 - (1+k)^2) + 2 >= 2 at the deadbeat gain
        let prob = scalar_problem(1.5);
        assert!(matches!(primal_dual_solve(&prob, &scalar(-0.6), &SolverConfig::default()), Err(Error::InfeasibleSuspected(_))));
        // the second state is uncontrollable, so gamma_N^2 >= 4 (1/(1 - 0.81) - 1) + 4 > 20 > m_4
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sys = LtiSystem::new(a, b, DMatrix::identity(2, 2), NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap()).unwrap();
        let prob = CocpProblem::new(sys, DMatrix::identity(2, 2), scalar(1.0), DMatrix::identity(2, 2), 20.0).unwrap();
        assert!(prob.m4() < 20.0);
        assert!(dual_bisection(&prob, 1e8, 1e-9).unwrap().is_none());
        let k0 = lqr_solve(&prob.sys, &prob.q, &prob.r).unwrap().gain;
        let cfg = SolverConfig {
            t_max: Some(20_000),
            ..Default::default()
        };
        assert!(matches!(primal_dual_solve(&prob, &k0, &cfg), Err(Error::InfeasibleSuspected(_))));
    }

    #[test]
    fn problem_validation() {
        let sys = LtiSystem::new(scalar(1.0), scalar(1.0), scalar(1.0), NoiseModel::gaussian(scalar(1.0)).unwrap()).unwrap();
        assert!(CocpProblem::new(sys.clone(), scalar(0.0), scalar(1.0), scalar(1.0), 1.0).is_err());
        assert!(CocpProblem::new(sys.clone(), scalar(1.0), scalar(1.0), scalar(1.0), -1.0).is_err());
        assert!(CocpProblem::new(sys, scalar(1.0), scalar(1.0), scalar(-1.0), 1.0).is_err());
        let tall_h = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sys = LtiSystem::new(DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2), tall_h, NoiseModel::gaussian(scalar(1.0)).unwrap()).unwrap();
        assert!(CocpProblem::new(sys, DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2), 1.0).is_err());
    }
}
