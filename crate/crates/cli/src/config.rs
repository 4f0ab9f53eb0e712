//! Experiment configuration.
//!
//! Configs are JSON documents tagged `"schema": "ergodic-risk/v1"`. Matrices are
//! row-major nested arrays. Any key can be overridden from the command line
//! with `--set dotted.path=value`, where the value is parsed as JSON and falls
//! back to a plain string.

use std::fs;
use std::path::{Path, PathBuf};

use erlqr_core::ergodicity::DriftOrder;
use erlqr_core::optimizer::{lqr_solve, CocpProblem, SolverConfig};
use erlqr_core::risk::GammaCConfig;
use erlqr_core::simulator::Gust;
use erlqr_core::system::InitialDistribution;
use erlqr_core::{DMatrix, DVector, LtiSystem, NoiseModel};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::instance::{random_instance, InstanceSpec};

pub const SCHEMA: &str = "ergodic-risk/v1";

pub type Rows = Vec<Vec<f64>>;

pub fn matrix_from_rows(name: &str, rows: &Rows) -> CliResult<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(CliError::config(format!("matrix {name} is empty")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::config(format!("matrix {name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cov: Option<Rows>,
    },
    StudentT {
        nu: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cov: Option<Rows>,
    },
    /// Noise bank: inline rows or a headerless CSV, one sample per line.
    Empirical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples: Option<Rows>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples_path: Option<PathBuf>,
    },
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Gaussian { cov: None }
    }
}

impl NoiseSpec {
    /// Builds the noise law; `base` resolves relative sample paths.
    pub fn build(&self, d: usize, base: &Path) -> CliResult<NoiseModel> {
        let cov = |c: &Option<Rows>| -> CliResult<DMatrix<f64>> {
            match c {
                Some(rows) => matrix_from_rows("noise.cov", rows),
                None => Ok(DMatrix::identity(d, d)),
            }
        };
        let model = match self {
            NoiseSpec::Gaussian { cov: c } => NoiseModel::gaussian(cov(c)?)?,
            NoiseSpec::StudentT { nu, cov: c } => NoiseModel::student_t(*nu, cov(c)?)?,
            NoiseSpec::Empirical { samples, samples_path } => {
                let rows = match (samples, samples_path) {
                    (Some(rows), None) => rows.clone(),
                    (None, Some(p)) => read_samples(&resolve(base, p))?,
                    _ => {
                        return Err(CliError::config(
                            "empirical noise needs exactly one of samples, samples_path",
                        ))
                    }
                };
                let bank = rows.iter().map(|r| DVector::from_vec(r.clone())).collect();
                NoiseModel::empirical(bank)?
            }
        };
        if model.dim() != d {
            return Err(CliError::config(format!(
                "noise dimension {} does not match H's column count {d}",
                model.dim()
            )));
        }
        Ok(model)
    }
}

fn read_samples(path: &Path) -> CliResult<Rows> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok(rows)
}

pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A plant with its cost and risk weights. `Q`, `R` and `Qc` default to
/// identities. The risk budget is either absolute (`beta_bar`) or a fraction
/// of the LQR gain's conditional variance (`beta_fraction`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "H")]
    pub h: Rows,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Rows>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
    #[serde(rename = "Qc", default, skip_serializing_if = "Option::is_none")]
    pub qc: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_cov: Option<Rows>,
}

impl ProblemSpec {
    pub fn from_problem(prob: &CocpProblem, noise: NoiseSpec) -> Self {
        Self {
            a: matrix_to_rows(prob.sys.a()),
            b: matrix_to_rows(prob.sys.b()),
            h: matrix_to_rows(prob.sys.h()),
            noise,
            q: Some(matrix_to_rows(&prob.q)),
            r: Some(matrix_to_rows(&prob.r)),
            qc: Some(matrix_to_rows(&prob.rf.qc)),
            beta_bar: Some(prob.beta_bar),
            beta_fraction: None,
            init_mean: None,
            init_cov: None,
        }
    }

    pub fn build(&self, base: &Path) -> CliResult<CocpProblem> {
        let a = matrix_from_rows("A", &self.a)?;
        let b = matrix_from_rows("B", &self.b)?;
        let h = matrix_from_rows("H", &self.h)?;
        let (n, m) = (a.nrows(), b.ncols());
        let noise = self.noise.build(h.ncols(), base)?;
        let mut sys = LtiSystem::new(a, b, h, noise)?;
        if self.init_mean.is_some() || self.init_cov.is_some() {
            let mean = self.init_mean.clone().map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(n));
            let cov = match &self.init_cov {
                Some(rows) => matrix_from_rows("init_cov", rows)?,
                None => DMatrix::zeros(n, n),
            };
            sys = sys.with_init(InitialDistribution { mean, cov })?;
        }
        let eye_or = |name: &str, rows: &Option<Rows>, k: usize| match rows {
            Some(r) => matrix_from_rows(name, r),
            None => Ok(DMatrix::identity(k, k)),
        };
        let q = eye_or("Q", &self.q, n)?;
        let r = eye_or("R", &self.r, m)?;
        let qc = eye_or("Qc", &self.qc, n)?;
        let beta_bar = match (self.beta_bar, self.beta_fraction) {
            (Some(b), None) => b,
            (None, Some(f)) => {
                if !(f.is_finite() && f > 0.0) {
                    return Err(CliError::config("beta_fraction must be positive"));
                }
                // Any positive placeholder: the budget does not enter gamma_N^2.
                let probe = CocpProblem::new(sys.clone(), q.clone(), r.clone(), qc.clone(), 1.0)?;
                let lqr = lqr_solve(&sys, &q, &r)?;
                f * probe.gamma_n_sq(&lqr.gain)?
            }
            _ => return Err(CliError::config("problem needs exactly one of beta_bar, beta_fraction")),
        };
        Ok(CocpProblem::new(sys, q, r, qc, beta_bar)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemSource {
    Path(PathBuf),
    Random(InstanceSpec),
    #[serde(untagged)]
    Inline(Box<ProblemSpec>),
}

/// A feedback law for simulation and certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    /// The LQR gain of the configured problem.
    Lqr,
    /// The gain found by the primal-dual solver (from `solution`, or solved on the spot).
    Optimal,
    /// A prior `solution.json`.
    Solution(PathBuf),
    Gain {
        gain: Rows,
        #[serde(default)]
        offset: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPolicy {
    pub label: String,
    pub policy: PolicySource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub horizon: usize,
    pub reps: usize,
    pub record_stride: usize,
    pub gust: Option<Gust>,
    /// Write per-replication terminal statistics to `rollouts.csv`.
    pub per_rollout: bool,
    pub lln: bool,
    /// Skipped automatically with fewer than 200 replications.
    pub clt: bool,
    /// Estimate `gamma_C^2` per policy with the estimator settings.
    pub gamma_c: bool,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            horizon: 10_000,
            reps: 100,
            record_stride: 100,
            gust: None,
            per_rollout: true,
            lln: true,
            clt: true,
            gamma_c: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub policy: PolicySource,
    /// Lyapunov weight, default `2 I`.
    pub q_drift: Option<Rows>,
    pub order: DriftOrder,
    pub draws: usize,
    pub n_states: usize,
    pub n_noise: usize,
    /// Multiplies the certified contraction rate; values above 1 corrupt
    /// the certificate (negative control).
    pub beta_scale: f64,
    pub b_scale: f64,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self {
            policy: PolicySource::Lqr,
            q_drift: None,
            order: DriftOrder::Quartic,
            draws: 200_000,
            n_states: 40,
            n_noise: 20_000,
            beta_scale: 1.0,
            b_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub problem: ProblemSource,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Initial gain for the solver; the LQR gain if absent.
    #[serde(default)]
    pub k0: Option<Rows>,
    /// Prior `solution.json` supplying the optimal gain.
    #[serde(default)]
    pub solution: Option<PathBuf>,
    #[serde(default = "default_policies")]
    pub policies: Vec<LabeledPolicy>,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub estimator: GammaCConfig,
    #[serde(default)]
    pub certify: CertifySection,
    /// Directory that relative paths resolve against (the config's directory).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_policies() -> Vec<LabeledPolicy> {
    vec![
        LabeledPolicy {
            label: "lqr".into(),
            policy: PolicySource::Lqr,
        },
        LabeledPolicy {
            label: "optimal".into(),
            policy: PolicySource::Optimal,
        },
    ]
}

impl ExperimentConfig {
    pub fn from_value(value: Value, base_dir: &Path) -> CliResult<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        if cfg.schema != SCHEMA {
            return Err(CliError::config(format!(
                "unsupported schema {:?}, expected {SCHEMA:?}",
                cfg.schema
            )));
        }
        cfg.base_dir = base_dir.to_path_buf();
        cfg.output_dir = resolve(base_dir, &cfg.output_dir);
        Ok(cfg)
    }

    /// Reads `path`, applies `--set` overrides, then `--seed` and `--out`.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        if let Some(s) = seed {
            value["seed"] = Value::from(s);
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_value(value, base)?;
        if let Some(o) = out {
            cfg.output_dir = o.to_path_buf();
        }
        Ok(cfg)
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.base_dir, p)
    }

    pub fn build_problem(&self) -> CliResult<CocpProblem> {
        match &self.problem {
            ProblemSource::Inline(spec) => spec.build(&self.base_dir),
            ProblemSource::Path(p) => {
                let path = self.path(p);
                let text = fs::read_to_string(&path)
                    .map_err(|e| CliError::config(format!("cannot read problem {}: {e}", path.display())))?;
                let spec: ProblemSpec = serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                spec.build(path.parent().unwrap_or(Path::new(".")))
            }
            ProblemSource::Random(spec) => Ok(random_instance(spec)?),
        }
    }
}

/// `key.sub=value`; array elements are addressed by index.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::config(format!("empty segment in override key {key:?}")));
        }
        let last = i + 1 == parts.len();
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::config(format!("{key:?}: {part:?} is not an array index")))?;
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::config(format!("{key:?}: index {idx} out of range")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::config(format!("{key:?}: {part:?} is not inside an object"))),
        };
    }
    Ok(())
}
