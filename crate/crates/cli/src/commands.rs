//! The five subcommands. Each writes its artifacts into the configured output
//! directory; the binary adds `metadata.json` (timestamps live only there).

use std::fs;
use std::path::Path;

use erlqr_core::ergodicity::{drift_certificate_with_order, evaluate_drift, CertificateConfig, DriftReport};
use erlqr_core::ergodicity::{default_q_drift, DriftCertificate};
use erlqr_core::matops::spectral_radius;
use erlqr_core::optimizer::{
    kkt_errors, lqr_solve, primal_dual_solve, riccati_policy, CocpProblem, KktErrors, SolveReport,
};
use erlqr_core::risk::{gamma_c_sq_estimate, GammaCConfig, GammaCEstimate};
use erlqr_core::simulator::{
    clt_check, lln_check, peak_post_gust_norm, rollout_ensemble, variance_curve_from, CltReport, LlnReport,
    RolloutConfig, VarianceCurve, CLT_TOLERANCE,
};
use erlqr_core::system::average_cost;
use erlqr_core::{DMatrix, DVector, Error as CoreError, Policy, QuadraticCost};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{
    matrix_from_rows, matrix_to_rows, ExperimentConfig, PolicySource, ProblemSource, ProblemSpec, Rows, SCHEMA,
};
use crate::error::{CliError, CliResult};
use crate::output::{ensure_dir, num, write_json, Table};

/// Replications below which the CLT check is skipped.
pub const CLT_MIN_REPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synthesize,
    Simulate,
    Certify,
    Randgen,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synthesize => "synthesize",
            Command::Simulate => "simulate",
            Command::Certify => "certify",
            Command::Randgen => "randgen",
            Command::Compare => "compare",
        }
    }
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> CliResult<()> {
    ensure_dir(&cfg.output_dir)?;
    match cmd {
        Command::Synthesize => cmd_synthesize(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::Certify => cmd_certify(cfg),
        Command::Randgen => cmd_randgen(cfg),
        Command::Compare => cmd_compare(cfg),
    }
}

/// Contents of `solution.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub schema: String,
    pub gain: Rows,
    pub beta_bar: f64,
    pub lambda_avg: f64,
    pub lambda_last: f64,
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    pub gamma_n_sq: f64,
    pub lqr_cost: f64,
    pub lqr_gamma_n_sq: f64,
    /// At `(gain, lambda_last)`.
    pub kkt_last: KktErrors,
    /// At `(gain, lambda_avg)`.
    pub kkt_avg: KktErrors,
}

impl SolutionFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn gain(&self) -> CliResult<DMatrix<f64>> {
        matrix_from_rows("gain", &self.gain)
    }

    /// Re-evaluates both KKT triples for `prob`.
    pub fn recompute_kkt(&self, prob: &CocpProblem) -> CliResult<(KktErrors, KktErrors)> {
        let gain = self.gain()?;
        Ok((
            kkt_errors(prob, &gain, self.lambda_last)?,
            kkt_errors(prob, &gain, self.lambda_avg)?,
        ))
    }
}

/// Starting gain: configured `k0`, else the LQR gain. When that gain sits
/// exactly on the risk budget the dual step is undefined, so the solver starts
/// from the Riccati policy at the initial multiplier instead.
pub fn initial_gain(cfg: &ExperimentConfig, prob: &CocpProblem) -> CliResult<DMatrix<f64>> {
    let k0 = match &cfg.k0 {
        Some(rows) => matrix_from_rows("k0", rows)?,
        None => lqr_solve(&prob.sys, &prob.q, &prob.r)?.gain,
    };
    let gamma0 = prob.gamma_n_sq(&k0)?;
    if (gamma0 - prob.beta_bar).abs() <= 1e-12 * prob.beta_bar.max(1.0) {
        info!("initial gain lies on the risk budget; starting from the Riccati policy instead");
        return Ok(riccati_policy(prob, cfg.solver.lambda0.max(1.0))?);
    }
    Ok(k0)
}

pub fn solve(cfg: &ExperimentConfig, prob: &CocpProblem) -> CliResult<SolveReport> {
    let k0 = initial_gain(cfg, prob)?;
    Ok(primal_dual_solve(prob, &k0, &cfg.solver)?)
}

pub fn solution_file(prob: &CocpProblem, report: &SolveReport) -> CliResult<SolutionFile> {
    let lqr = lqr_solve(&prob.sys, &prob.q, &prob.r)?;
    Ok(SolutionFile {
        schema: SCHEMA.into(),
        gain: matrix_to_rows(&report.gain),
        beta_bar: prob.beta_bar,
        lambda_avg: report.lambda_avg,
        lambda_last: report.lambda_last,
        iterations: report.iterations,
        converged: report.converged,
        cost: report.cost,
        gamma_n_sq: report.gamma_n,
        lqr_cost: lqr.cost,
        lqr_gamma_n_sq: prob.gamma_n_sq(&lqr.gain)?,
        kkt_last: report.kkt_last,
        kkt_avg: report.kkt_avg,
    })
}

pub fn history_table(report: &SolveReport) -> Table {
    let mut t = Table::new(&["m", "lambda", "grad_norm", "cs", "feas_gap", "J", "gammaN"]);
    for r in &report.history {
        t.push(vec![
            r.m.to_string(),
            num(r.lambda),
            num(r.grad_norm),
            num(r.cs),
            num(r.feas_gap),
            num(r.j),
            num(r.gamma_n),
        ]);
    }
    t
}

pub fn cmd_synthesize(cfg: &ExperimentConfig) -> CliResult<()> {
    let prob = cfg.build_problem()?;
    let report = solve(cfg, &prob)?;
    write_json(&cfg.output_dir, "solution.json", &solution_file(&prob, &report)?)?;
    history_table(&report).write(&cfg.output_dir, "history.csv")?;
    if report.converged {
        info!(
            "converged after {} iterations: J = {}, gamma_N^2 = {} (budget {})",
            report.iterations, report.cost, report.gamma_n, prob.beta_bar
        );
        Ok(())
    } else {
        Err(CliError::NotConverged(report.iterations))
    }
}

/// Resolves policy sources, solving the problem at most once.
struct PolicyResolver<'a> {
    cfg: &'a ExperimentConfig,
    prob: &'a CocpProblem,
    optimal: Option<DMatrix<f64>>,
}

impl<'a> PolicyResolver<'a> {
    fn new(cfg: &'a ExperimentConfig, prob: &'a CocpProblem) -> Self {
        Self { cfg, prob, optimal: None }
    }

    fn resolve(&mut self, src: &PolicySource) -> CliResult<Policy> {
        let gain = match src {
            PolicySource::Lqr => lqr_solve(&self.prob.sys, &self.prob.q, &self.prob.r)?.gain,
            PolicySource::Solution(p) => SolutionFile::load(&self.cfg.path(p))?.gain()?,
            PolicySource::Gain { gain, offset } => {
                let k = matrix_from_rows("gain", gain)?;
                let l = match offset {
                    Some(v) => DVector::from_vec(v.clone()),
                    None => DVector::zeros(k.nrows()),
                };
                return Ok(Policy::new(k, l)?);
            }
            PolicySource::Optimal => {
                if self.optimal.is_none() {
                    let gain = match &self.cfg.solution {
                        Some(p) => SolutionFile::load(&self.cfg.path(p))?.gain()?,
                        None => {
                            let report = solve(self.cfg, self.prob)?;
                            if !report.converged {
                                warn!(
                                    "solver stopped after {} iterations without converging; using its last gain",
                                    report.iterations
                                );
                            }
                            report.gain
                        }
                    };
                    self.optimal = Some(gain);
                }
                self.optimal.clone().expect("just set")
            }
        };
        Ok(Policy::linear(gain))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub label: String,
    pub gain: Rows,
    pub offset: Vec<f64>,
    pub spectral_radius: f64,
    pub cost: f64,
    pub gamma_n_sq: f64,
    /// Ensemble mean of `S_T^2 / T`.
    pub terminal_mean_s2_over_t: f64,
    /// Ensemble mean of the realized average cost `J_T / T`.
    pub empirical_cost: f64,
    pub peak_post_gust_norm: Option<f64>,
    pub lln: Option<LlnReport>,
    pub clt: Option<CltReport>,
    pub gamma_c: Option<GammaCEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub seed: u64,
    pub beta_bar: f64,
    pub rollout: RolloutConfig,
    pub policies: Vec<PolicySummary>,
}

fn require_fourth(prob: &CocpProblem) -> CliResult<()> {
    if prob.sys.noise().fourth_moment_finite() {
        Ok(())
    } else {
        Err(CoreError::MomentUndefined(
            "simulation of the risk criteria needs a finite fourth noise moment".into(),
        )
        .into())
    }
}

fn estimator(cfg: &ExperimentConfig) -> GammaCConfig {
    GammaCConfig {
        seed: cfg.seed,
        ..cfg.estimator.clone()
    }
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> CliResult<()> {
    let prob = cfg.build_problem()?;
    require_fourth(&prob)?;
    if cfg.policies.is_empty() {
        return Err(CliError::config("simulate needs at least one policy"));
    }
    let sec = &cfg.rollout;
    let rc = RolloutConfig {
        horizon: sec.horizon,
        reps: sec.reps,
        seed: cfg.seed,
        gust: sec.gust,
        record_stride: sec.record_stride,
    };
    let cost = QuadraticCost::new(prob.q.clone(), prob.r.clone())?;
    let mut resolver = PolicyResolver::new(cfg, &prob);
    let mut curves = Table::new(&["policy", "t", "mean_S2_over_t", "sd"]);
    let mut rollouts = Table::new(&["policy", "rep", "S_T", "N_T", "J_T_over_T", "final_norm"]);
    let mut summaries = Vec::new();
    for lp in &cfg.policies {
        let pol = resolver.resolve(&lp.policy)?;
        let runs = rollout_ensemble(&prob.sys, &pol, &prob.rf, Some(&cost), &rc)?;
        let curve: VarianceCurve = variance_curve_from(&runs);
        for ((t, m), s) in curve.times.iter().zip(&curve.mean_s2_over_t).zip(&curve.sd) {
            curves.push(vec![lp.label.clone(), t.to_string(), num(*m), num(*s)]);
        }
        let horizon = rc.horizon as f64;
        for (rep, run) in runs.iter().enumerate() {
            rollouts.push(vec![
                lp.label.clone(),
                rep.to_string(),
                num(*run.s_series.last().expect("horizon >= 1")),
                num(*run.n_series.last().expect("horizon >= 1")),
                num(run.j_t / horizon),
                num(run.final_state.norm()),
            ]);
        }
        let peaks: Vec<f64> = runs.iter().filter_map(|r| peak_post_gust_norm(r, &rc)).collect();
        let peak = (!peaks.is_empty()).then(|| peaks.iter().sum::<f64>() / peaks.len() as f64);
        let lln = if sec.lln { Some(lln_check(&prob.sys, &pol, &rc)?) } else { None };
        let clt = if sec.clt && rc.reps >= CLT_MIN_REPS {
            Some(clt_check(&prob.sys, &pol, &prob.rf, &rc, CLT_TOLERANCE)?)
        } else {
            if sec.clt {
                info!("{}: CLT check skipped ({} < {CLT_MIN_REPS} replications)", lp.label, rc.reps);
            }
            None
        };
        let gamma_c = if sec.gamma_c {
            Some(gamma_c_sq_estimate(&prob.sys, &pol, &prob.rf, &estimator(cfg))?)
        } else {
            None
        };
        summaries.push(PolicySummary {
            label: lp.label.clone(),
            gain: matrix_to_rows(&pol.gain),
            offset: pol.offset.iter().copied().collect(),
            spectral_radius: spectral_radius(&(prob.sys.a() + prob.sys.b() * &pol.gain)),
            cost: average_cost(&prob.sys, &prob.q, &prob.r, &pol)?,
            gamma_n_sq: policy_gamma_n(&prob, &pol)?,
            terminal_mean_s2_over_t: curve.terminal(),
            empirical_cost: runs.iter().map(|r| r.j_t / horizon).sum::<f64>() / runs.len() as f64,
            peak_post_gust_norm: peak,
            lln,
            clt,
            gamma_c,
        });
    }
    curves.write(&cfg.output_dir, "curves.csv")?;
    if sec.per_rollout {
        rollouts.write(&cfg.output_dir, "rollouts.csv")?;
    }
    let summary = SimulationSummary {
        seed: cfg.seed,
        beta_bar: prob.beta_bar,
        rollout: rc,
        policies: summaries,
    };
    write_json(&cfg.output_dir, "summary.json", &summary)?;
    Ok(())
}

fn policy_gamma_n(prob: &CocpProblem, pol: &Policy) -> CliResult<f64> {
    Ok(erlqr_core::risk::gamma_n_sq(&prob.sys, pol, &prob.rf)?)
}

/// Certificate for the configured policy, with the optional corruption factors
/// applied.
pub fn certificate(cfg: &ExperimentConfig, prob: &CocpProblem, pol: &Policy) -> CliResult<DriftCertificate> {
    let sec = &cfg.certify;
    let q_drift = match &sec.q_drift {
        Some(rows) => matrix_from_rows("q_drift", rows)?,
        None => default_q_drift(prob.n()),
    };
    let cc = CertificateConfig {
        draws: sec.draws,
        seed: cfg.seed,
    };
    let mut cert = drift_certificate_with_order(&prob.sys, pol, &q_drift, &cc, sec.order)?;
    if sec.beta_scale != 1.0 || sec.b_scale != 1.0 {
        warn!(
            "certificate altered: beta x {}, b x {} (negative control)",
            sec.beta_scale, sec.b_scale
        );
        cert.beta *= sec.beta_scale;
        cert.b *= sec.b_scale;
    }
    Ok(cert)
}

pub fn cmd_certify(cfg: &ExperimentConfig) -> CliResult<()> {
    let prob = cfg.build_problem()?;
    let pol = PolicyResolver::new(cfg, &prob).resolve(&cfg.certify.policy)?;
    let cert = certificate(cfg, &prob, &pol)?;
    write_json(&cfg.output_dir, "certificate.json", &cert)?;
    let sec = &cfg.certify;
    let report: DriftReport = evaluate_drift(&cert, &prob.sys, &pol, sec.n_states, sec.n_noise, cfg.seed)?;
    write_json(&cfg.output_dir, "drift_report.json", &report)?;
    if report.pass {
        info!("drift condition verified at {} states", report.points.len());
        Ok(())
    } else {
        let p = report.worst_point();
        Err(CoreError::DriftViolated {
            x: p.x.iter().copied().collect(),
            excess: p.excess(),
        }
        .into())
    }
}

pub fn cmd_randgen(cfg: &ExperimentConfig) -> CliResult<()> {
    let ProblemSource::Random(spec) = &cfg.problem else {
        return Err(CliError::config("randgen needs a \"random\" problem source"));
    };
    let prob = cfg.build_problem()?;
    let doc = ProblemSpec::from_problem(&prob, spec.noise.clone());
    write_json(&cfg.output_dir, "problem.json", &doc)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub label: String,
    pub cost: f64,
    pub gamma_n_sq: f64,
    pub spectral_radius: f64,
    pub feasible: bool,
    /// Relative to the first policy, in percent.
    pub cost_change_pct: f64,
    pub gamma_n_change_pct: f64,
    pub gamma_c: Option<GammaCEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub beta_bar: f64,
    pub policies: Vec<CompareEntry>,
}

pub fn compare(cfg: &ExperimentConfig, prob: &CocpProblem) -> CliResult<CompareReport> {
    let mut resolver = PolicyResolver::new(cfg, prob);
    let mut entries: Vec<CompareEntry> = Vec::new();
    for lp in &cfg.policies {
        let pol = resolver.resolve(&lp.policy)?;
        let cost = average_cost(&prob.sys, &prob.q, &prob.r, &pol)?;
        let gamma = policy_gamma_n(prob, &pol)?;
        let (c0, g0) = entries.first().map_or((cost, gamma), |e| (e.cost, e.gamma_n_sq));
        let gamma_c = if cfg.rollout.gamma_c {
            Some(gamma_c_sq_estimate(&prob.sys, &pol, &prob.rf, &estimator(cfg))?)
        } else {
            None
        };
        entries.push(CompareEntry {
            label: lp.label.clone(),
            cost,
            gamma_n_sq: gamma,
            spectral_radius: spectral_radius(&(prob.sys.a() + prob.sys.b() * &pol.gain)),
            feasible: gamma <= prob.beta_bar,
            cost_change_pct: 100.0 * (cost - c0) / c0,
            gamma_n_change_pct: 100.0 * (gamma - g0) / g0,
            gamma_c,
        });
    }
    Ok(CompareReport {
        beta_bar: prob.beta_bar,
        policies: entries,
    })
}

pub fn cmd_compare(cfg: &ExperimentConfig) -> CliResult<()> {
    let prob = cfg.build_problem()?;
    let report = compare(cfg, &prob)?;
    for e in &report.policies {
        info!(
            "{}: J = {:.6}, gamma_N^2 = {:.6} ({:+.2}% cost, {:+.2}% risk)",
            e.label, e.cost, e.gamma_n_sq, e.cost_change_pct, e.gamma_n_change_pct
        );
    }
    write_json(&cfg.output_dir, "compare.json", &report)?;
    Ok(())
}
