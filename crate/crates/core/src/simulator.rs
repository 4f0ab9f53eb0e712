//! Seeded rollouts of the closed loop with running statistics
//!
//! - `S_t = sum_{s<=t} C_s` (cumulative per-step uncertainty),
//! - `N_t = sum_{s<=t} E[C_s^2 | X_{s-1}]`,
//! - `Lambda_t = sum_{s<=t} (X_s - x_bar)`, `Gamma_t = sum_{s<=t} (X_s - x_bar)(X_s - x_bar)^T`,
//! - `J_t = sum_{s<=t} c(X_s, U_s)`.
//!
//! Replication `r` of seed `s` draws from [`stream_rng`]`(s, r)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{solve_dlyap, spectral_radius, sym_eig, symmetrize};
use crate::risk::{lambda_cov_zero, RiskFunctional, RiskTerms};
use crate::rng::stream_rng;
use crate::system::{closed_loop, ClosedLoop, LtiSystem, Policy, QuadraticCost};

pub const OVERFLOW_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gust {
    pub period: usize,
    pub magnitude: f64,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub reps: usize,
    pub seed: u64,
    pub gust: Option<Gust>,
    pub record_stride: usize,
}

impl RolloutConfig {
    pub fn new(horizon: usize, reps: usize, seed: u64) -> Self {
        Self {
            horizon,
            reps,
            seed,
            gust: None,
            record_stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn with_gust(mut self, gust: Gust) -> Self {
        self.gust = Some(gust);
        self
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.horizon == 0 || self.reps == 0 || self.record_stride == 0 {
            return Err(Error::invalid("horizon, reps and record_stride must be at least 1"));
        }
        if let Some(g) = &self.gust {
            if g.period == 0 {
                return Err(Error::invalid("gust period must be at least 1"));
            }
            if g.channel >= d {
                return Err(Error::ChannelOutOfRange { channel: g.channel, dim: d });
            }
        }
        Ok(())
    }

    /// Recorded times `min(i * stride, T)`, `i = 1..=ceil(T / stride)`.
    pub fn record_times(&self) -> Vec<usize> {
        let count = self.horizon.div_ceil(self.record_stride);
        (1..=count).map(|i| (i * self.record_stride).min(self.horizon)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub times: Vec<usize>,
    pub s_series: Vec<f64>,
    /// NaN when the noise has no finite fourth moment.
    pub n_series: Vec<f64>,
    /// `||X_t||` at the recorded times.
    pub state_norms: Vec<f64>,
    pub lambda_t: DVector<f64>,
    pub gamma_t: DMatrix<f64>,
    /// Cumulative stage cost; zero unless a cost was supplied.
    pub j_t: f64,
    pub final_state: DVector<f64>,
    pub steps: usize,
    /// True when the policy was not stabilizing.
    pub unstable: bool,
    /// True when gusts were injected (the nominal criteria do not describe the run).
    pub model_mismatch: bool,
}

/// Deterministic disturbance added to `W_{t+1}` at step `t`: `magnitude e_channel`
/// when `t` is a positive multiple of the period, zero otherwise.
pub fn inject_gust(cfg: &RolloutConfig, d: usize, t: usize) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(d);
    if let Some(g) = &cfg.gust {
        if g.channel >= d {
            return Err(Error::ChannelOutOfRange { channel: g.channel, dim: d });
        }
        if g.period == 0 {
            return Err(Error::invalid("gust period must be at least 1"));
        }
        if t > 0 && t.is_multiple_of(g.period) {
            out[g.channel] = g.magnitude;
        }
    }
    Ok(out)
}

/// Closed-loop quantities without the stability requirement; stationary
/// moments are NaN for unstable gains.
fn loose_closed_loop(sys: &LtiSystem, pol: &Policy) -> Result<ClosedLoop> {
    match closed_loop(sys, pol) {
        Ok(cl) => Ok(cl),
        Err(Error::NotStabilizing { rho }) | Err(Error::NotSchurStable { rho, .. }) => {
            warn!("rolling out a non-stabilizing policy (spectral radius {rho:.6})");
            let n = sys.n();
            let a_k = sys.a() + sys.b() * &pol.gain;
            let b_offset = sys.b() * &pol.offset;
            let x_bar = (DMatrix::<f64>::identity(n, n) - &a_k)
                .lu()
                .solve(&b_offset)
                .unwrap_or_else(|| DVector::zeros(n));
            Ok(ClosedLoop {
                gain: pol.gain.clone(),
                offset: pol.offset.clone(),
                spectral_radius: spectral_radius(&a_k),
                a_k,
                sigma_k: DMatrix::from_element(n, n, f64::NAN),
                x_bar,
                b_offset,
                h: sys.h().clone(),
                input_cov: sys.input_covariance(),
                noise: sys.noise().clone(),
            })
        }
        Err(e) => Err(e),
    }
}

fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let spec = sym_eig(&symmetrize(cov))?;
    let n = cov.nrows();
    let mut root = DMatrix::zeros(n, n);
    for p in &spec.pairs {
        if p.value > 0.0 {
            root += &p.vector * p.vector.transpose() * p.value.sqrt();
        }
    }
    Ok(root)
}

struct Buffers {
    x: DVector<f64>,
    next: DVector<f64>,
    z: DVector<f64>,
    w: DVector<f64>,
    hw: DVector<f64>,
    qhw: DVector<f64>,
    centered: DVector<f64>,
    u: DVector<f64>,
}

fn simulate(
    sys: &LtiSystem,
    cl: &ClosedLoop,
    terms: Option<&RiskTerms>,
    cost: Option<&QuadraticCost>,
    cfg: &RolloutConfig,
    rep: usize,
) -> Result<RolloutStats> {
    let n = sys.n();
    let d = sys.d();
    cfg.validate(d)?;
    if let Some(c) = cost {
        if c.q.shape() != (n, n) || c.r.shape() != (sys.m(), sys.m()) {
            return Err(Error::dims("cost weights do not match the system"));
        }
    }
    let mut rng = stream_rng(cfg.seed, rep as u64);
    let init = sys.init();
    let mut b = Buffers {
        x: init.mean.clone(),
        next: DVector::zeros(n),
        z: DVector::zeros(n),
        w: DVector::zeros(d),
        hw: DVector::zeros(n),
        qhw: DVector::zeros(n),
        centered: DVector::zeros(n),
        u: DVector::zeros(sys.m()),
    };
    if init.cov.iter().any(|v| *v != 0.0) {
        let root = psd_sqrt(&init.cov)?;
        let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        b.x.gemv(1.0, &root, &e, 1.0);
    }

    let times = cfg.record_times();
    let mut stats = RolloutStats {
        s_series: Vec::with_capacity(times.len()),
        n_series: Vec::with_capacity(times.len()),
        state_norms: Vec::with_capacity(times.len()),
        times,
        lambda_t: DVector::zeros(n),
        gamma_t: DMatrix::zeros(n, n),
        j_t: 0.0,
        final_state: DVector::zeros(n),
        steps: 0,
        unstable: !cl.sigma_k[(0, 0)].is_finite(),
        model_mismatch: cfg.gust.is_some(),
    };
    let moments = terms.and_then(|t| t.moments.as_ref());
    let q_m3 = moments.map(|m| m.m3.clone());
    let m4 = moments.map(|m| m.m4).unwrap_or(f64::NAN);
    let mut s = 0.0;
    let mut n_acc = 0.0;
    let mut next_record = 0;

    for t in 0..cfg.horizon {
        // z = A_K x + B l
        b.z.gemv(1.0, &cl.a_k, &b.x, 0.0);
        b.z += &cl.b_offset;
        sys.noise().draw_into(&mut rng, &mut b.w);
        if cfg.gust.is_some() {
            b.w += inject_gust(cfg, d, t)?;
        }
        b.hw.gemv(1.0, &cl.h, &b.w, 0.0);
        if let Some(terms) = terms {
            // u = Q_K^c z + K^T R^c l
            b.centered.gemv(1.0, &terms.q_kc, &b.z, 0.0);
            b.centered += &terms.input_offset;
            b.qhw.gemv(1.0, &terms.q_kc, &b.hw, 0.0);
            s += 2.0 * b.centered.dot(&b.hw) + b.hw.dot(&b.qhw) - terms.trace_qs;
            if let Some(qm3) = &q_m3 {
                b.qhw.gemv(1.0, &cl.input_cov, &b.centered, 0.0);
                n_acc += 4.0 * b.centered.dot(&b.qhw) + 4.0 * b.centered.dot(qm3) + m4;
            } else {
                n_acc = f64::NAN;
            }
        }
        b.next.copy_from(&b.z);
        b.next += &b.hw;
        std::mem::swap(&mut b.x, &mut b.next);
        let step = t + 1;

        let norm = b.x.norm();
        if norm.is_nan() || norm > OVERFLOW_NORM {
            stats.final_state = b.x.clone();
            stats.steps = step;
            return Err(Error::NumericalOverflow {
                step,
                norm,
                partial: Box::new(stats),
            });
        }
        b.centered.copy_from(&b.x);
        b.centered -= &cl.x_bar;
        stats.lambda_t += &b.centered;
        stats.gamma_t.ger(1.0, &b.centered, &b.centered, 1.0);
        if let Some(c) = cost {
            b.u.copy_from(&cl.offset);
            b.u.gemv(1.0, &cl.gain, &b.x, 1.0);
            b.next.gemv(1.0, &c.q, &b.x, 0.0);
            stats.j_t += b.x.dot(&b.next) + b.u.dot(&(&c.r * &b.u));
        }
        if next_record < stats.times.len() && stats.times[next_record] == step {
            stats.s_series.push(s);
            stats.n_series.push(if terms.is_some() { n_acc } else { f64::NAN });
            stats.state_norms.push(norm);
            next_record += 1;
        }
    }
    stats.final_state = b.x;
    stats.steps = cfg.horizon;
    Ok(stats)
}

/// One replication of `(sys, pol)`; deterministic in `(cfg.seed, rep)`.
pub fn rollout(
    sys: &LtiSystem,
    pol: &Policy,
    rf: &RiskFunctional,
    cost: Option<&QuadraticCost>,
    cfg: &RolloutConfig,
    rep: usize,
) -> Result<RolloutStats> {
    pol.check_dims(sys)?;
    let cl = loose_closed_loop(sys, pol)?;
    let terms = RiskTerms::new(&cl, rf)?;
    simulate(sys, &cl, Some(&terms), cost, cfg, rep)
}

/// All replications `0..cfg.reps`, in index order.
pub fn rollout_ensemble(
    sys: &LtiSystem,
    pol: &Policy,
    rf: &RiskFunctional,
    cost: Option<&QuadraticCost>,
    cfg: &RolloutConfig,
) -> Result<Vec<RolloutStats>> {
    pol.check_dims(sys)?;
    let cl = loose_closed_loop(sys, pol)?;
    let terms = RiskTerms::new(&cl, rf)?;
    (0..cfg.reps)
        .into_par_iter()
        .map(|rep| simulate(sys, &cl, Some(&terms), cost, cfg, rep))
        .collect()
}

fn require_fourth(sys: &LtiSystem) -> Result<()> {
    if sys.noise().fourth_moment_finite() {
        Ok(())
    } else {
        Err(Error::MomentUndefined(
            "this check needs a finite fourth noise moment (Student-t nu > 4)".into(),
        ))
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Across-replication mean and standard deviation of `S_t^2 / t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub times: Vec<usize>,
    pub mean_s2_over_t: Vec<f64>,
    pub sd: Vec<f64>,
}

impl VarianceCurve {
    pub fn terminal(&self) -> f64 {
        *self.mean_s2_over_t.last().expect("horizon >= 1")
    }
}

pub fn ensemble_variance_curve(
    sys: &LtiSystem,
    pol: &Policy,
    rf: &RiskFunctional,
    cfg: &RolloutConfig,
) -> Result<VarianceCurve> {
    require_fourth(sys)?;
    let runs = rollout_ensemble(sys, pol, rf, None, cfg)?;
    Ok(variance_curve_from(&runs))
}

pub fn variance_curve_from(runs: &[RolloutStats]) -> VarianceCurve {
    let times = runs[0].times.clone();
    let mut mean_s2_over_t = Vec::with_capacity(times.len());
    let mut sd = Vec::with_capacity(times.len());
    for (i, t) in times.iter().enumerate() {
        let t = *t as f64;
        let (m, s) = mean_sd(runs.iter().map(|r| r.s_series[i].powi(2) / t));
        mean_s2_over_t.push(m);
        sd.push(s);
    }
    VarianceCurve {
        times,
        mean_s2_over_t,
        sd,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlnReport {
    /// `||Lambda_T / T||`.
    pub lambda_dev: f64,
    /// `||Gamma_T / T - Sigma_K||_F / ||Sigma_K||_F`.
    pub gamma_rel_dev: f64,
    /// Zero stationary covariance: the relative deviation is meaningless.
    pub degenerate: bool,
    pub pass: bool,
}

pub const LLN_TOLERANCE: f64 = 0.05;

/// Single-trajectory law of large numbers for `Lambda_t` and `Gamma_t`
/// (replication 0 of `cfg`).
pub fn lln_check(sys: &LtiSystem, pol: &Policy, cfg: &RolloutConfig) -> Result<LlnReport> {
    let cl = closed_loop(sys, pol)?;
    let one = RolloutConfig {
        reps: 1,
        record_stride: cfg.horizon,
        ..cfg.clone()
    };
    let stats = simulate(sys, &cl, None, None, &one, 0)?;
    let t = cfg.horizon as f64;
    let lambda_dev = (&stats.lambda_t / t).norm();
    let sk = cl.sigma_k.norm();
    let degenerate = sk == 0.0;
    let diff = (&stats.gamma_t / t - &cl.sigma_k).norm();
    let gamma_rel_dev = if degenerate { diff } else { diff / sk };
    Ok(LlnReport {
        lambda_dev,
        gamma_rel_dev,
        degenerate,
        pass: !degenerate && gamma_rel_dev <= LLN_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub lambda_cov_empirical: DMatrix<f64>,
    pub lambda_cov_theory: DMatrix<f64>,
    /// Frobenius relative deviation.
    pub lambda_rel_dev: f64,
    pub s_var_empirical: f64,
    /// Limit of `E[S_t^2] / t`, equal to `gamma_N^2` because `S_t^2 - N_t` is a martingale.
    pub s_var_theory: f64,
    pub s_rel_dev: f64,
    /// `max_r |S_T / sqrt(T)|`, the statistic of interest when the theory is zero.
    pub s_max_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const CLT_TOLERANCE: f64 = 0.15;

/// Ensemble covariance of `Lambda_T / sqrt(T)` and variance of `S_T / sqrt(T)`
/// against their limits.
pub fn clt_check(
    sys: &LtiSystem,
    pol: &Policy,
    rf: &RiskFunctional,
    cfg: &RolloutConfig,
    tolerance: f64,
) -> Result<CltReport> {
    require_fourth(sys)?;
    if cfg.reps < 200 {
        return Err(Error::invalid("the CLT check needs at least 200 replications"));
    }
    let cl = closed_loop(sys, pol)?;
    let terms = RiskTerms::new(&cl, rf)?;
    let s_var_theory = terms.gamma_n_sq(&cl)?;
    let lambda_cov_theory = lambda_cov_zero(&cl)?;
    let one = RolloutConfig {
        record_stride: cfg.horizon,
        ..cfg.clone()
    };
    let runs: Vec<RolloutStats> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| simulate(sys, &cl, Some(&terms), None, &one, rep))
        .collect::<Result<_>>()?;
    let n = sys.n();
    let r = runs.len() as f64;
    let root_t = (cfg.horizon as f64).sqrt();
    let scaled: Vec<DVector<f64>> = runs.iter().map(|s| &s.lambda_t / root_t).collect();
    let mean = scaled.iter().fold(DVector::zeros(n), |acc, v| acc + v) / r;
    let mut cov = DMatrix::zeros(n, n);
    for v in &scaled {
        let c = v - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    let lambda_cov_empirical = cov / (r - 1.0);
    let lambda_rel_dev = (&lambda_cov_empirical - &lambda_cov_theory).norm() / lambda_cov_theory.norm();

    let s_vals: Vec<f64> = runs.iter().map(|s| s.s_series[0] / root_t).collect();
    let (_, sd) = mean_sd(s_vals.iter().copied());
    let s_var_empirical = sd * sd;
    let s_max_abs = s_vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let s_rel_dev = if s_var_theory > 0.0 {
        (s_var_empirical - s_var_theory).abs() / s_var_theory
    } else {
        s_max_abs
    };
    Ok(CltReport {
        pass: lambda_rel_dev <= tolerance && s_rel_dev <= tolerance,
        lambda_cov_empirical,
        lambda_cov_theory,
        lambda_rel_dev,
        s_var_empirical,
        s_var_theory,
        s_rel_dev,
        s_max_abs,
        tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleIncrement {
    pub from: usize,
    pub to: usize,
    pub mean: f64,
    pub std_err: f64,
}

impl MartingaleIncrement {
    pub fn z_score(&self) -> f64 {
        if self.std_err == 0.0 {
            if self.mean == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            self.mean / self.std_err
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    /// Ensemble means of `(S_to^2 - N_to) - (S_from^2 - N_from)`.
    pub doob: Vec<MartingaleIncrement>,
    /// Ensemble means of `C_t = S_t - S_{t-1}` at `t = to`.
    pub mds: Vec<MartingaleIncrement>,
}

/// Doob-decomposition and martingale-difference checks over `(from, to)`
/// windows; `from = 0` means the increment from the start.
pub fn martingale_check(
    sys: &LtiSystem,
    pol: &Policy,
    rf: &RiskFunctional,
    cfg: &RolloutConfig,
    windows: &[(usize, usize)],
) -> Result<MartingaleReport> {
    require_fourth(sys)?;
    for &(from, to) in windows {
        if from >= to || to > cfg.horizon || to == 0 {
            return Err(Error::invalid(format!("bad window ({from}, {to})")));
        }
    }
    let stride1 = RolloutConfig {
        record_stride: 1,
        ..cfg.clone()
    };
    let cl = closed_loop(sys, pol)?;
    let terms = RiskTerms::new(&cl, rf)?;
    type Paths = (Vec<f64>, Vec<f64>);
    let runs: Vec<Paths> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let s = simulate(sys, &cl, Some(&terms), None, &stride1, rep)?;
            let pick = |t: usize, series: &[f64]| if t == 0 { 0.0 } else { series[t - 1] };
            let doob = windows
                .iter()
                .map(|&(f, t)| {
                    (pick(t, &s.s_series).powi(2) - pick(t, &s.n_series))
                        - (pick(f, &s.s_series).powi(2) - pick(f, &s.n_series))
                })
                .collect();
            let mds = windows
                .iter()
                .map(|&(_, t)| pick(t, &s.s_series) - pick(t - 1, &s.s_series))
                .collect();
            Ok((doob, mds))
        })
        .collect::<Result<_>>()?;
    let r = (runs.len() as f64).sqrt();
    let summarize = |get: &dyn Fn(&Paths) -> &Vec<f64>| {
        windows
            .iter()
            .enumerate()
            .map(|(i, &(from, to))| {
                let (mean, sd) = mean_sd(runs.iter().map(|x| get(x)[i]));
                MartingaleIncrement {
                    from,
                    to,
                    mean,
                    std_err: sd / r,
                }
            })
            .collect()
    };
    Ok(MartingaleReport {
        doob: summarize(&|x| &x.0),
        mds: summarize(&|x| &x.1),
    })
}

/// `N_T / T` of one long trajectory, the pathwise estimate of `gamma_N^2`.
pub fn conditional_variance_average(
    sys: &LtiSystem,
    pol: &Policy,
    rf: &RiskFunctional,
    horizon: usize,
    seed: u64,
) -> Result<f64> {
    require_fourth(sys)?;
    let cfg = RolloutConfig::new(horizon, 1, seed).with_stride(horizon);
    let stats = rollout(sys, pol, rf, None, &cfg, 0)?;
    Ok(stats.n_series[0] / horizon as f64)
}

/// Largest `||X_t||` at recorded times after the first gust.
pub fn peak_post_gust_norm(stats: &RolloutStats, cfg: &RolloutConfig) -> Option<f64> {
    let g = cfg.gust?;
    stats
        .times
        .iter()
        .zip(&stats.state_norms)
        .filter(|(t, _)| **t > g.period)
        .map(|(_, v)| *v)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
}

/// Stationary covariance helper for tests and reports.
pub fn stationary_covariance(sys: &LtiSystem, pol: &Policy) -> Result<DMatrix<f64>> {
    let a_k = sys.a() + sys.b() * &pol.gain;
    solve_dlyap(&a_k, &sys.input_covariance())
}
