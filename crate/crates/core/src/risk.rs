//! Ergodic-risk criteria of a closed loop under the quadratic risk functional
//! `g(x, u) = x^T Q^c x + u^T R^c u`.
//!
//! With `z = A_K x + B l` the one-step uncertainty is
//! `C_{t+1} = 2 (Q_K^c z + K^T R^c l)^T H W + tr(Q_K^c H (W W^T - Sigma_W) H^T)`,
//! a martingale difference. The `K^T R^c l` term vanishes whenever the risk
//! functional ignores the input or the policy is linear.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{
    min_eigenvalue, require_square, require_symmetric, spectral_density_from_input, sym_eig,
    symmetrize, SpectrumResult,
};
use crate::noise::MomentFunctionals;
use crate::rng::stream_rng;
use crate::simulator::{rollout, RolloutConfig};
use crate::system::{closed_loop, ClosedLoop, LtiSystem, Policy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskFunctional {
    pub qc: DMatrix<f64>,
    pub rc: DMatrix<f64>,
}

fn require_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    require_square(name, m)?;
    require_symmetric(m, 1e-10)?;
    if min_eigenvalue(m) < -1e-12 * m.norm().max(1.0) {
        return Err(Error::invalid(format!("{name} must be PSD")));
    }
    Ok(())
}

impl RiskFunctional {
    pub fn new(qc: DMatrix<f64>, rc: DMatrix<f64>) -> Result<Self> {
        require_psd("Q^c", &qc)?;
        if !rc.is_empty() {
            require_psd("R^c", &rc)?;
        }
        Ok(Self {
            qc: symmetrize(&qc),
            rc: symmetrize(&rc),
        })
    }

    /// `R^c = 0` with `m` inputs.
    pub fn state_only(qc: DMatrix<f64>, m: usize) -> Result<Self> {
        Self::new(qc, DMatrix::zeros(m, m))
    }

    pub fn is_state_only(&self) -> bool {
        self.rc.iter().all(|v| *v == 0.0)
    }

    /// `Q_K^c = Q^c + K^T R^c K`.
    pub fn q_k(&self, gain: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(&self.qc + gain.transpose() * &self.rc * gain))
    }

    /// `g(x, u)`.
    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.qc * x)) + u.dot(&(&self.rc * u))
    }

    fn check_dims(&self, cl: &ClosedLoop) -> Result<()> {
        let (m, n) = cl.gain.shape();
        if self.qc.shape() != (n, n) || self.rc.shape() != (m, m) {
            return Err(Error::dims(format!(
                "risk functional expects Q^c {n}x{n} and R^c {m}x{m}"
            )));
        }
        Ok(())
    }
}

/// Per-closed-loop constants used by every risk evaluation.
#[derive(Debug, Clone)]
pub struct RiskTerms {
    pub q_kc: DMatrix<f64>,
    /// `Q_K^c H Sigma_W H^T Q_K^c`.
    pub weighted_input: DMatrix<f64>,
    /// `tr(Q_K^c H Sigma_W H^T)`.
    pub trace_qs: f64,
    /// `K^T R^c l`.
    pub input_offset: DVector<f64>,
    /// `None` when the noise lacks the third or fourth moment.
    pub moments: Option<MomentFunctionals>,
}

impl RiskTerms {
    pub fn new(cl: &ClosedLoop, rf: &RiskFunctional) -> Result<Self> {
        rf.check_dims(cl)?;
        let q_kc = rf.q_k(&cl.gain);
        let weighted_input = symmetrize(&(&q_kc * &cl.input_cov * &q_kc));
        let trace_qs = (&q_kc * &cl.input_cov).trace();
        let input_offset = cl.gain.transpose() * &rf.rc * &cl.offset;
        let moments = if cl.noise.fourth_moment_finite() {
            Some(cl.noise.moment_functionals(&q_kc, &cl.h)?)
        } else {
            None
        };
        Ok(Self {
            q_kc,
            weighted_input,
            trace_qs,
            input_offset,
            moments,
        })
    }

    pub fn require_moments(&self) -> Result<&MomentFunctionals> {
        self.moments.as_ref().ok_or_else(|| {
            Error::MomentUndefined(
                "the conditional variance needs a finite fourth noise moment (Student-t nu > 4)".into(),
            )
        })
    }

    /// Coefficient `u = Q_K^c z + K^T R^c l` of the linear part of `C_{t+1}`.
    pub fn linear_coefficient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.q_kc * z + &self.input_offset
    }

    /// `C_{t+1}` from `z = A_K x + B l` and the realized `H W`.
    pub fn c_from_parts(&self, z: &DVector<f64>, hw: &DVector<f64>) -> f64 {
        let qhw = &self.q_kc * hw;
        2.0 * z.dot(&qhw) + 2.0 * self.input_offset.dot(hw) + hw.dot(&qhw) - self.trace_qs
    }

    /// `E[C_{t+1}^2 | X_t]` from `z = A_K x + B l`:
    /// `4 u^T H Sigma_W H^T u + 4 u^T M_3 + m_4`.
    pub fn conditional_variance_from_z(&self, cl: &ClosedLoop, z: &DVector<f64>) -> Result<f64> {
        let mom = self.require_moments()?;
        let u = self.linear_coefficient(z);
        Ok(4.0 * u.dot(&(&cl.input_cov * &u)) + 4.0 * u.dot(&mom.m3) + mom.m4)
    }

    /// Closed form of `gamma_N^2`; with `K^T R^c l = 0` this is
    /// `4 tr(Q S Q (Sigma_K - S + x x^T)) + 4 M_3^T Q x + m_4`.
    pub fn gamma_n_sq_raw(&self, cl: &ClosedLoop) -> Result<f64> {
        let mom = self.require_moments()?;
        let centered = &cl.a_k * &cl.sigma_k * cl.a_k.transpose();
        let u_bar = &self.q_kc * &cl.x_bar + &self.input_offset;
        Ok(4.0 * (&self.weighted_input * centered).trace()
            + 4.0 * u_bar.dot(&(&cl.input_cov * &u_bar))
            + 4.0 * u_bar.dot(&mom.m3)
            + mom.m4)
    }

    /// `gamma_N^2` with floating-point negativity clamped to zero.
    pub fn gamma_n_sq(&self, cl: &ClosedLoop) -> Result<f64> {
        let raw = self.gamma_n_sq_raw(cl)?;
        let scale = 1.0_f64.max(self.require_moments()?.m4.abs() + (&self.weighted_input * &cl.sigma_k).trace().abs());
        clamp_nonnegative(raw, scale, "gamma_N^2")
    }
}

fn clamp_nonnegative(raw: f64, scale: f64, what: &str) -> Result<f64> {
    if raw >= 0.0 {
        Ok(raw)
    } else if raw >= -1e-10 * scale {
        warn!("{what} = {raw:e} is negative within round-off; clamped to 0");
        Ok(0.0)
    } else {
        Err(Error::invalid(format!(
            "{what} evaluated to {raw:e}; a large negative value means a violated precondition"
        )))
    }
}

/// `C_{t+1}` at state `x_t` and noise draw `w_next`.
pub fn c_step(cl: &ClosedLoop, rf: &RiskFunctional, x: &DVector<f64>, w_next: &DVector<f64>) -> Result<f64> {
    rf.check_dims(cl)?;
    let q_kc = rf.q_k(&cl.gain);
    let z = &cl.a_k * x + &cl.b_offset;
    let hw = &cl.h * w_next;
    let qhw = &q_kc * &hw;
    let offset = cl.gain.transpose() * &rf.rc * &cl.offset;
    Ok(2.0 * z.dot(&qhw) + 2.0 * offset.dot(&hw) + hw.dot(&qhw) - (&q_kc * &cl.input_cov).trace())
}

/// `C_{t+1} = g(X_{t+1}, U_{t+1}) - E[g(X_{t+1}, U_{t+1}) | X_t = x]` evaluated
/// literally, with the conditional expectation of the quadratic form in
/// closed form.
pub fn c_step_definition(cl: &ClosedLoop, rf: &RiskFunctional, x: &DVector<f64>, w_next: &DVector<f64>) -> Result<f64> {
    rf.check_dims(cl)?;
    let z = &cl.a_k * x + &cl.b_offset;
    let x_next = &z + &cl.h * w_next;
    let u_next = &cl.gain * &x_next + &cl.offset;
    let realized = rf.evaluate(&x_next, &u_next);
    // E[X'] = z, Cov[X'] = S; U' = K X' + l
    let mean_u = &cl.gain * &z + &cl.offset;
    let expected = rf.evaluate(&z, &mean_u)
        + (&rf.qc * &cl.input_cov).trace()
        + (&rf.rc * &cl.gain * &cl.input_cov * cl.gain.transpose()).trace();
    Ok(realized - expected)
}

/// `E[C_{t+1}^2 | X_t = x]`.
pub fn conditional_variance_step(cl: &ClosedLoop, rf: &RiskFunctional, x: &DVector<f64>) -> Result<f64> {
    let terms = RiskTerms::new(cl, rf)?;
    let z = &cl.a_k * x + &cl.b_offset;
    terms.conditional_variance_from_z(cl, &z)
}

/// Asymptotic conditional variance `gamma_N^2` of `(sys, pol)`.
pub fn gamma_n_sq(sys: &LtiSystem, pol: &Policy, rf: &RiskFunctional) -> Result<f64> {
    let cl = closed_loop(sys, pol)?;
    RiskTerms::new(&cl, rf)?.gamma_n_sq(&cl)
}

/// `M = Q_K^c - A_K^T Q_K^c A_K`.
pub fn risk_weight_matrix(cl: &ClosedLoop, rf: &RiskFunctional) -> DMatrix<f64> {
    let q = rf.q_k(&cl.gain);
    symmetrize(&(&q - cl.a_k.transpose() * &q * &cl.a_k))
}

/// Covariance `Sigma_Gamma(0) = (I - A_K)^{-1} H Sigma_W H^T (I - A_K)^{-T}` of
/// the limit of `Lambda_t / sqrt(t)`.
pub fn lambda_cov_zero(cl: &ClosedLoop) -> Result<DMatrix<f64>> {
    let sd = spectral_density_from_input(&cl.a_k, &cl.input_cov, 0.0)?;
    Ok(symmetrize(&sd.map(|z| z.re)))
}

/// Smallest `N` with `||A_K^N||_2 <= 1e-8`.
pub fn ma_truncation(a_k: &DMatrix<f64>) -> usize {
    let mut power = a_k.clone();
    for n in 1..=1_000_000 {
        if power.norm() <= 1e-8 {
            // Frobenius bounds the spectral norm
            return n;
        }
        power = a_k * power;
    }
    1_000_000
}

/// Periodic trapezoid rule of an even `2 pi`-periodic integrand over
/// `[-pi, pi]` with `nodes` intervals.
fn even_periodic_trapezoid(nodes: usize, f: impl Fn(f64) -> Result<f64> + Sync) -> Result<f64> {
    let nodes = nodes.max(2);
    let h = 2.0 * std::f64::consts::PI / nodes as f64;
    let half = nodes / 2;
    let values: Vec<f64> = (0..=half)
        .into_par_iter()
        .map(|k| f(k as f64 * h))
        .collect::<Result<_>>()?;
    let mut sum = values[0];
    for (k, v) in values.iter().enumerate().skip(1) {
        // nodes k and nodes-k coincide only at k = nodes/2 for even counts
        let weight = if nodes.is_multiple_of(2) && k == half { 1.0 } else { 2.0 };
        sum += weight * v;
    }
    Ok(h * sum)
}

fn require_gaussian(cl: &ClosedLoop) -> Result<()> {
    if cl.noise.is_gaussian() {
        Ok(())
    } else {
        Err(Error::RequiresGaussian)
    }
}

/// Gaussian integral form `(1/pi) int sum_j lambda_j^2 |v_j^T Sigma_Gamma(w) v_j|^2 dw`
/// over the eigen-directions of the symmetric matrix `m`.
pub fn gamma_m_sq_gaussian(cl: &ClosedLoop, m: &DMatrix<f64>, nodes: usize) -> Result<f64> {
    Ok(gamma_m_sq_gaussian_directions(cl, m, nodes)?.0)
}

/// Total plus the per-direction `gamma_{v_j}^2` of the Gaussian integral form.
pub fn gamma_m_sq_gaussian_directions(
    cl: &ClosedLoop,
    m: &DMatrix<f64>,
    nodes: usize,
) -> Result<(f64, Vec<f64>)> {
    require_gaussian(cl)?;
    let spec = sym_eig(m)?;
    let per_direction: Vec<f64> = spec
        .pairs
        .iter()
        .map(|p| {
            let v = &p.vector;
            let integral = even_periodic_trapezoid(nodes, |w| {
                let sd = spectral_density_from_input(&cl.a_k, &cl.input_cov, w)?;
                let vc = v.map(|x| nalgebra::Complex::new(x, 0.0));
                let val = vc.dot(&(&sd * &vc));
                Ok(val.norm_sqr())
            })?;
            Ok(integral / std::f64::consts::PI)
        })
        .collect::<Result<_>>()?;
    let total = spec
        .pairs
        .iter()
        .zip(&per_direction)
        .map(|(p, g)| p.value * p.value * g)
        .sum();
    Ok((total, per_direction))
}

/// Asymptotic variance of `tr(M (Gamma_t - t Sigma_K)) / sqrt(t)` for
/// Gaussian noise including the covariances between eigen-directions:
/// `(1/pi) int tr(M Sigma_Gamma(w) M Sigma_Gamma(w)) dw`.
pub fn quadratic_form_variance_gaussian(cl: &ClosedLoop, m: &DMatrix<f64>, nodes: usize) -> Result<f64> {
    require_gaussian(cl)?;
    let mc = m.map(|x| nalgebra::Complex::new(x, 0.0));
    let integral = even_periodic_trapezoid(nodes, |w| {
        let sd = spectral_density_from_input(&cl.a_k, &cl.input_cov, w)?;
        let prod = &mc * &sd;
        Ok((&prod * &prod).trace().re)
    })?;
    Ok(integral / std::f64::consts::PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaCMethod {
    /// Spectral integral for Gaussian noise, autocovariance otherwise.
    Auto,
    Autocov,
    BatchMeans,
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaCConfig {
    pub method: GammaCMethod,
    /// Largest lag in the autocovariance sum (default: the MA truncation).
    pub k_max: Option<usize>,
    /// Moving-average truncation of the stationary process.
    pub ma_trunc: Option<usize>,
    pub reps: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Quadrature intervals for the spectral method.
    pub nodes: usize,
}

impl Default for GammaCConfig {
    fn default() -> Self {
        Self {
            method: GammaCMethod::Auto,
            k_max: None,
            ma_trunc: None,
            reps: 20,
            horizon: 50_000,
            seed: 0,
            nodes: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionVariance {
    pub eigenvalue: f64,
    pub vector: DVector<f64>,
    pub gamma_sq: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaCEstimate {
    pub value: f64,
    pub std_err: f64,
    pub method: GammaCMethod,
    /// Empty for batch means, which does not decompose by direction.
    pub per_direction: Vec<DirectionVariance>,
}

/// Estimate of the asymptotic variance `gamma_C^2`.
///
/// `Autocov` and `Spectral` evaluate `sum_j lambda_j^2 gamma_{v_j}^2` over the
/// eigenpairs of `M = Q_K^c - A_K^T Q_K^c A_K`; `BatchMeans` is the empirical
/// variance of `S_T / sqrt(T)` over independent rollouts.
pub fn gamma_c_sq_estimate(
    sys: &LtiSystem,
    pol: &Policy,
    rf: &RiskFunctional,
    cfg: &GammaCConfig,
) -> Result<GammaCEstimate> {
    let cl = closed_loop(sys, pol)?;
    if !cl.noise.fourth_moment_finite() {
        return Err(Error::MomentUndefined(
            "gamma_C^2 needs a finite fourth noise moment (Student-t nu > 4)".into(),
        ));
    }
    let method = match cfg.method {
        GammaCMethod::Auto if cl.noise.is_gaussian() => GammaCMethod::Spectral,
        GammaCMethod::Auto => GammaCMethod::Autocov,
        other => other,
    };
    let m = risk_weight_matrix(&cl, rf);
    match method {
        GammaCMethod::Spectral => {
            let spec = sym_eig(&m)?;
            let (value, per) = gamma_m_sq_gaussian_directions(&cl, &m, cfg.nodes)?;
            Ok(GammaCEstimate {
                value,
                std_err: 0.0,
                method,
                per_direction: spec
                    .pairs
                    .into_iter()
                    .zip(per)
                    .map(|(p, g)| DirectionVariance {
                        eigenvalue: p.value,
                        vector: p.vector,
                        gamma_sq: g,
                        std_err: 0.0,
                    })
                    .collect(),
            })
        }
        GammaCMethod::Autocov => autocov_estimate(&cl, &m, cfg),
        GammaCMethod::BatchMeans => batch_means_estimate(sys, pol, rf, cfg),
        GammaCMethod::Auto => unreachable!("resolved above"),
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn autocov_estimate(cl: &ClosedLoop, m: &DMatrix<f64>, cfg: &GammaCConfig) -> Result<GammaCEstimate> {
    if cfg.reps < 2 || cfg.horizon < 2 {
        return Err(Error::invalid("autocovariance estimator needs reps >= 2 and horizon >= 2"));
    }
    let spec: SpectrumResult = sym_eig(m)?;
    let n = cl.n();
    let ma = cfg.ma_trunc.unwrap_or_else(|| ma_truncation(&cl.a_k));
    let k_max = cfg.k_max.unwrap_or(ma);
    let stationary_second: Vec<f64> = spec
        .pairs
        .iter()
        .map(|p| p.vector.dot(&(&cl.sigma_k * &p.vector)))
        .collect();

    let per_rep: Vec<Vec<f64>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(cfg.seed, rep as u64);
            let mut y = DVector::<f64>::zeros(n);
            let mut next = DVector::<f64>::zeros(n);
            let mut w = DVector::<f64>::zeros(cl.noise.dim());
            let mut step = |y: &mut DVector<f64>, next: &mut DVector<f64>, rng: &mut _| {
                cl.noise.draw_into(rng, &mut w);
                next.gemv(1.0, &cl.a_k, y, 0.0);
                next.gemv(1.0, &cl.h, &w, 1.0);
                std::mem::swap(y, next);
            };
            // burn-in of length N realizes the truncated MA(N) representation
            for _ in 0..ma {
                step(&mut y, &mut next, &mut rng);
            }
            let len = cfg.horizon + k_max;
            let mut squares: Vec<Vec<f64>> = vec![Vec::with_capacity(len); spec.pairs.len()];
            for _ in 0..len {
                for (j, p) in spec.pairs.iter().enumerate() {
                    let a = p.vector.dot(&y);
                    squares[j].push(a * a);
                }
                step(&mut y, &mut next, &mut rng);
            }
            squares
                .iter()
                .zip(&stationary_second)
                .map(|(sq, s)| {
                    let s2 = s * s;
                    let mut gamma = 0.0;
                    for k in 0..=k_max {
                        let mean = sq[..cfg.horizon]
                            .iter()
                            .zip(&sq[k..k + cfg.horizon])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / cfg.horizon as f64;
                        gamma += if k == 0 { 1.0 } else { 2.0 } * (mean - s2);
                    }
                    gamma
                })
                .collect()
        })
        .collect();

    let totals: Vec<f64> = per_rep
        .iter()
        .map(|g| spec.pairs.iter().zip(g).map(|(p, gj)| p.value * p.value * gj).sum())
        .collect();
    let (value, std_err) = mean_and_se(&totals);
    let per_direction = spec
        .pairs
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let vals: Vec<f64> = per_rep.iter().map(|g| g[j]).collect();
            let (g, se) = mean_and_se(&vals);
            DirectionVariance {
                eigenvalue: p.value,
                vector: p.vector.clone(),
                gamma_sq: g,
                std_err: se,
            }
        })
        .collect();
    Ok(GammaCEstimate {
        value,
        std_err,
        method: GammaCMethod::Autocov,
        per_direction,
    })
}

fn batch_means_estimate(
    sys: &LtiSystem,
    pol: &Policy,
    rf: &RiskFunctional,
    cfg: &GammaCConfig,
) -> Result<GammaCEstimate> {
    if cfg.reps < 2 {
        return Err(Error::invalid("batch means needs reps >= 2"));
    }
    let rcfg = RolloutConfig {
        horizon: cfg.horizon,
        reps: cfg.reps,
        seed: cfg.seed,
        gust: None,
        record_stride: cfg.horizon,
    };
    let finals: Vec<f64> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let stats = rollout(sys, pol, rf, None, &rcfg, rep)?;
            Ok(stats.s_series.last().copied().unwrap_or(0.0) / (cfg.horizon as f64).sqrt())
        })
        .collect::<Result<_>>()?;
    let r = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / r;
    let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let fourth = finals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / r;
    let std_err = ((fourth - var * var).max(0.0) / r).sqrt();
    Ok(GammaCEstimate {
        value: var,
        std_err,
        method: GammaCMethod::BatchMeans,
        per_direction: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicRiskReport {
    pub gamma_n_sq: f64,
    pub gamma_c_sq: f64,
    pub gamma_c_sq_std_err: f64,
    pub gamma_c_method: GammaCMethod,
    pub m: DMatrix<f64>,
    pub eigenpairs: SpectrumResult,
    pub per_direction: Vec<f64>,
}

pub fn ergodic_risk_report(
    sys: &LtiSystem,
    pol: &Policy,
    rf: &RiskFunctional,
    cfg: &GammaCConfig,
) -> Result<ErgodicRiskReport> {
    let cl = closed_loop(sys, pol)?;
    let gamma_n = RiskTerms::new(&cl, rf)?.gamma_n_sq(&cl)?;
    let m = risk_weight_matrix(&cl, rf);
    let eigenpairs = sym_eig(&m)?;
    let est = gamma_c_sq_estimate(sys, pol, rf, cfg)?;
    Ok(ErgodicRiskReport {
        gamma_n_sq: gamma_n,
        gamma_c_sq: est.value,
        gamma_c_sq_std_err: est.std_err,
        gamma_c_method: est.method,
        m,
        eigenpairs,
        per_direction: est.per_direction.iter().map(|d| d.gamma_sq).collect(),
    })
}
