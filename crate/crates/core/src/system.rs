//! The controlled plant `X_{t+1} = A X_t + B U_t + H W_{t+1}`, affine
//! stationary policies `U = K X + l`, and closed-loop quantities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{
    controllability_rank, is_positive_definite, min_eigenvalue, rank, require_square,
    require_symmetric, solve_dlyap_with_margin, spectral_radius, symmetrize,
    DEFAULT_STABILITY_MARGIN,
};
use crate::noise::{NoiseKind, NoiseModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDistribution {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl InitialDistribution {
    /// Point mass at the origin.
    pub fn origin(n: usize) -> Self {
        Self {
            mean: DVector::zeros(n),
            cov: DMatrix::zeros(n, n),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    h: DMatrix<f64>,
    noise: NoiseModel,
    init: InitialDistribution,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, h: DMatrix<f64>, noise: NoiseModel) -> Result<Self> {
        let n = require_square("A", &a)?;
        if b.nrows() != n {
            return Err(Error::dims(format!("B must have {n} rows, got {}", b.nrows())));
        }
        if h.nrows() != n || h.ncols() != noise.dim() {
            return Err(Error::dims(format!(
                "H must be {n}x{}, got {}x{}",
                noise.dim(),
                h.nrows(),
                h.ncols()
            )));
        }
        if [&a, &b, &h].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("system matrices must be finite"));
        }
        Ok(Self {
            init: InitialDistribution::origin(n),
            a,
            b,
            h,
            noise,
        })
    }

    pub fn with_init(mut self, init: InitialDistribution) -> Result<Self> {
        let n = self.n();
        if init.mean.len() != n || init.cov.shape() != (n, n) {
            return Err(Error::dims("initial distribution dimensions do not match the state"));
        }
        require_symmetric(&init.cov, 1e-10)?;
        if init.cov.iter().any(|v| *v != 0.0) && min_eigenvalue(&init.cov) < -1e-12 {
            return Err(Error::invalid("initial covariance must be PSD"));
        }
        self.init = init;
        Ok(self)
    }

    /// Same plant with a different noise law (dimension must agree).
    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.h.clone(), noise)?.with_init(self.init.clone())
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    pub fn init(&self) -> &InitialDistribution {
        &self.init
    }
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn d(&self) -> usize {
        self.h.ncols()
    }

    /// `H Sigma_W H^T`.
    pub fn input_covariance(&self) -> DMatrix<f64> {
        symmetrize(&(&self.h * self.noise.covariance() * self.h.transpose()))
    }

    pub fn h_full_row_rank(&self) -> bool {
        rank(&self.h) == self.n()
    }
}

/// Affine stationary Markov policy `x -> K x + l`. Stability is checked where
/// the policy is used, not at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl Policy {
    pub fn new(gain: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if gain.nrows() != offset.len() {
            return Err(Error::dims("policy offset length must equal the gain's row count"));
        }
        if gain.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("policy entries must be finite"));
        }
        Ok(Self { gain, offset })
    }

    pub fn linear(gain: DMatrix<f64>) -> Self {
        let m = gain.nrows();
        Self {
            gain,
            offset: DVector::zeros(m),
        }
    }

    pub(crate) fn check_dims(&self, sys: &LtiSystem) -> Result<()> {
        if self.gain.shape() != (sys.m(), sys.n()) || self.offset.len() != sys.m() {
            return Err(Error::dims(format!(
                "policy gain must be {}x{} with offset of length {}",
                sys.m(),
                sys.n(),
                sys.m()
            )));
        }
        Ok(())
    }
}

/// Quantities of the closed-loop chain under a stabilizing policy.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    /// `A + B K`.
    pub a_k: DMatrix<f64>,
    /// Stationary covariance solving `Sigma_K = A_K Sigma_K A_K^T + H Sigma_W H^T`.
    pub sigma_k: DMatrix<f64>,
    /// Stationary mean solving `x = A_K x + B l`.
    pub x_bar: DVector<f64>,
    /// `B l`.
    pub b_offset: DVector<f64>,
    pub h: DMatrix<f64>,
    /// `H Sigma_W H^T`.
    pub input_cov: DMatrix<f64>,
    pub noise: NoiseModel,
    pub spectral_radius: f64,
}

impl ClosedLoop {
    pub fn n(&self) -> usize {
        self.a_k.nrows()
    }

    /// `Q + K^T R K`.
    pub fn q_k(&self, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(q + self.gain.transpose() * r * &self.gain))
    }
}

pub fn closed_loop(sys: &LtiSystem, pol: &Policy) -> Result<ClosedLoop> {
    closed_loop_with_margin(sys, pol, DEFAULT_STABILITY_MARGIN)
}

pub fn closed_loop_with_margin(sys: &LtiSystem, pol: &Policy, margin: f64) -> Result<ClosedLoop> {
    pol.check_dims(sys)?;
    let n = sys.n();
    let a_k = sys.a() + sys.b() * &pol.gain;
    let rho = spectral_radius(&a_k);
    if !(rho.is_finite() && rho <= 1.0 - margin) {
        return Err(Error::NotStabilizing { rho });
    }
    let input_cov = sys.input_covariance();
    let sigma_k = solve_dlyap_with_margin(&a_k, &input_cov, margin)?;
    let b_offset = sys.b() * &pol.offset;
    let x_bar = (DMatrix::<f64>::identity(n, n) - &a_k)
        .lu()
        .solve(&b_offset)
        .ok_or(Error::Singular("stationary mean"))?;
    Ok(ClosedLoop {
        gain: pol.gain.clone(),
        offset: pol.offset.clone(),
        a_k,
        sigma_k,
        x_bar,
        b_offset,
        h: sys.h().clone(),
        input_cov,
        noise: sys.noise().clone(),
        spectral_radius: rho,
    })
}

pub fn is_stabilizing(sys: &LtiSystem, gain: &DMatrix<f64>) -> bool {
    is_stabilizing_with_margin(sys, gain, DEFAULT_STABILITY_MARGIN)
}

pub fn is_stabilizing_with_margin(sys: &LtiSystem, gain: &DMatrix<f64>, margin: f64) -> bool {
    if gain.shape() != (sys.m(), sys.n()) {
        return false;
    }
    let rho = spectral_radius(&(sys.a() + sys.b() * gain));
    rho.is_finite() && rho <= 1.0 - margin
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Cannot be decided from the available data.
    Unverifiable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub status: CheckStatus,
    pub detail: String,
}

impl AssumptionCheck {
    fn from_bool(ok: bool, detail: String) -> Self {
        Self {
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub stabilizing: AssumptionCheck,
    pub controllable: AssumptionCheck,
    pub noise_covariance_pd: AssumptionCheck,
    pub fourth_moment: AssumptionCheck,
    pub noise_density: AssumptionCheck,
    pub h_full_row_rank: AssumptionCheck,
}

impl AssumptionReport {
    pub fn checks(&self) -> [(&'static str, &AssumptionCheck); 6] {
        [
            ("stabilizing", &self.stabilizing),
            ("controllable", &self.controllable),
            ("noise_covariance_pd", &self.noise_covariance_pd),
            ("fourth_moment", &self.fourth_moment),
            ("noise_density", &self.noise_density),
            ("h_full_row_rank", &self.h_full_row_rank),
        ]
    }

    /// No check failed (unverifiable ones are not failures).
    pub fn all_pass(&self) -> bool {
        self.checks().iter().all(|(_, c)| c.status != CheckStatus::Fail)
    }
}

/// Checks the standing assumptions of the limit theorems for `(sys, pol)`.
pub fn assert_assumptions(sys: &LtiSystem, pol: &Policy) -> AssumptionReport {
    let dims_ok = pol.check_dims(sys).is_ok();
    let a_k = if dims_ok {
        Some(sys.a() + sys.b() * &pol.gain)
    } else {
        None
    };
    let stabilizing = match &a_k {
        Some(a_k) => {
            let rho = spectral_radius(a_k);
            AssumptionCheck::from_bool(
                rho <= 1.0 - DEFAULT_STABILITY_MARGIN,
                format!("spectral radius of A+BK = {rho:.6}"),
            )
        }
        None => AssumptionCheck::from_bool(false, "policy dimensions do not match".into()),
    };
    let controllable = match &a_k {
        Some(a_k) => {
            let r = controllability_rank(a_k, sys.h());
            AssumptionCheck::from_bool(r == sys.n(), format!("rank [H, A_K H, ...] = {r} of {}", sys.n()))
        }
        None => AssumptionCheck::from_bool(false, "policy dimensions do not match".into()),
    };
    let cov = sys.noise().covariance();
    let noise_covariance_pd = AssumptionCheck::from_bool(
        is_positive_definite(cov),
        format!("min eigenvalue of Sigma_W = {:.3e}", min_eigenvalue(cov)),
    );
    let fourth_moment = match sys.noise().kind() {
        NoiseKind::StudentT { nu } => AssumptionCheck::from_bool(
            *nu > 4.0,
            format!("Student-t with nu = {nu}: finite fourth moment requires nu > 4"),
        ),
        _ => AssumptionCheck::from_bool(true, format!("{} noise", sys.noise().name())),
    };
    let noise_density = match sys.noise().kind() {
        NoiseKind::Empirical { .. } => AssumptionCheck {
            status: CheckStatus::Unverifiable,
            detail: "a finite sample bank cannot certify a non-singular density".into(),
        },
        _ => AssumptionCheck::from_bool(true, "non-degenerate parametric density".into()),
    };
    let h_full_row_rank = AssumptionCheck::from_bool(
        sys.h_full_row_rank(),
        format!("rank H = {} of {}", rank(sys.h()), sys.n()),
    );
    AssumptionReport {
        stabilizing,
        controllable,
        noise_covariance_pd,
        fourth_moment,
        noise_density,
        h_full_row_rank,
    }
}

/// Stage-cost weights `(Q, R)` of the average cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl QuadraticCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        require_square("Q", &q)?;
        require_square("R", &r)?;
        require_symmetric(&q, 1e-10)?;
        require_symmetric(&r, 1e-10)?;
        if min_eigenvalue(&q) < -1e-12 * q.norm().max(1.0) {
            return Err(Error::invalid("Q must be PSD"));
        }
        if !is_positive_definite(&r) {
            return Err(Error::invalid("R must be positive definite"));
        }
        Ok(Self {
            q: symmetrize(&q),
            r: symmetrize(&r),
        })
    }
}

/// `J = tr((Q + K^T R K)(Sigma_K + x_bar x_bar^T))`.
pub fn average_cost(sys: &LtiSystem, q: &DMatrix<f64>, r: &DMatrix<f64>, pol: &Policy) -> Result<f64> {
    if q.shape() != (sys.n(), sys.n()) || r.shape() != (sys.m(), sys.m()) {
        return Err(Error::dims("cost weights do not match the system"));
    }
    let cl = closed_loop(sys, pol)?;
    Ok(closed_loop_cost(&cl, q, r))
}

pub fn closed_loop_cost(cl: &ClosedLoop, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let second_moment = &cl.sigma_k + &cl.x_bar * cl.x_bar.transpose();
    (cl.q_k(q, r) * second_moment).trace()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::{solve_dare, riccati_gain};
    use crate::testutil::{random_matrix, random_psd, random_stable, rng};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_system(a: f64, b: f64, noise: NoiseModel) -> LtiSystem {
        LtiSystem::new(scalar(a), scalar(b), scalar(1.0), noise).unwrap()
    }

    fn unit_gaussian() -> NoiseModel {
        NoiseModel::gaussian(scalar(1.0)).unwrap()
    }

    #[test]
    fn deadbeat_scalar_closed_loop() {
        let sys = scalar_system(0.5, 1.0, unit_gaussian());
        let cl = closed_loop(&sys, &Policy::linear(scalar(-0.5))).unwrap();
        assert_eq!(cl.a_k[(0, 0)], 0.0);
        assert!((cl.sigma_k[(0, 0)] - 1.0).abs() < 1e-14);
        assert_eq!(cl.x_bar[0], 0.0);
    }

    #[test]
    fn offset_gives_geometric_stationary_mean() {
        let sys = scalar_system(0.5, 1.0, unit_gaussian());
        let pol = Policy::new(scalar(0.0), DVector::from_element(1, 1.0)).unwrap();
        let cl = closed_loop(&sys, &pol).unwrap();
        assert!((cl.x_bar[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn closed_loop_invariants_on_random_instance() {
        let mut r = rng(30);
        let a = random_stable(&mut r, 4, 0.9);
        let b = random_matrix(&mut r, 4, 2);
        let h = random_matrix(&mut r, 4, 3);
        let sys = LtiSystem::new(a, b, h, NoiseModel::gaussian(DMatrix::identity(3, 3)).unwrap()).unwrap();
        let k = random_matrix(&mut r, 2, 4) * 0.05;
        assert!(is_stabilizing(&sys, &k));
        let pol = Policy::new(k, DVector::from_vec(vec![0.3, -1.0])).unwrap();
        let cl = closed_loop(&sys, &pol).unwrap();
        let s = sys.input_covariance();
        // oracle: Kronecker solve via nalgebra
        let lhs = DMatrix::<f64>::identity(16, 16) - cl.a_k.kronecker(&cl.a_k);
        let vx = lhs.full_piv_lu().solve(&DVector::from_column_slice(s.as_slice())).unwrap();
        let oracle = DMatrix::from_column_slice(4, 4, vx.as_slice());
        assert!((&cl.sigma_k - &oracle).norm() <= 1e-10 * oracle.norm());
        let res = &cl.sigma_k - &cl.a_k * &cl.sigma_k * cl.a_k.transpose() - &s;
        assert!(res.norm() <= 1e-10 * cl.sigma_k.norm().max(1.0));
        let fix = &cl.x_bar - (&cl.a_k * &cl.x_bar + &cl.b_offset);
        assert!(fix.norm() <= 1e-10);
        // truncated series for x_bar
        let mut series = DVector::zeros(4);
        let mut term = cl.b_offset.clone();
        while term.norm() > 1e-15 {
            series += &term;
            term = &cl.a_k * term;
        }
        assert!((&series - &cl.x_bar).norm() <= 1e-10 * cl.x_bar.norm().max(1.0));
        // trace-Lyapunov identity for an arbitrary weight
        let qc = random_psd(&mut r, 4);
        let ident = (&qc * &cl.sigma_k - cl.a_k.transpose() * &qc * &cl.a_k * &cl.sigma_k - &qc * &s).trace();
        assert!(ident.abs() <= 1e-9 * (&qc * &cl.sigma_k).trace().abs().max(1.0));
    }

    #[test]
    fn stabilizing_pins() {
        let sys = LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2), NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap()).unwrap();
        assert!(is_stabilizing(&sys, &(DMatrix::identity(2, 2) * 0.5)));
        let sys = scalar_system(2.0, 0.0, unit_gaussian());
        assert!(!is_stabilizing(&sys, &scalar(-10.0)));
        let sys = scalar_system(1.0, 1.0, unit_gaussian());
        assert!(!is_stabilizing(&sys, &scalar(0.0)));
        assert!(matches!(
            closed_loop(&sys, &Policy::linear(scalar(0.0))),
            Err(Error::NotStabilizing { .. })
        ));
    }

    #[test]
    fn assumption_report_pins() {
        let sys = scalar_system(0.5, 1.0, unit_gaussian());
        let pol = Policy::linear(scalar(-0.5));
        assert!(assert_assumptions(&sys, &pol).all_pass());

        let sys0 = LtiSystem::new(scalar(0.5), scalar(1.0), scalar(0.0), unit_gaussian()).unwrap();
        let rep = assert_assumptions(&sys0, &pol);
        assert_eq!(rep.controllable.status, CheckStatus::Fail);
        assert!(!rep.all_pass());

        let t3 = scalar_system(0.5, 1.0, NoiseModel::student_t(3.0, scalar(1.0)).unwrap());
        let rep = assert_assumptions(&t3, &pol);
        assert_eq!(rep.fourth_moment.status, CheckStatus::Fail);
        let t5 = scalar_system(0.5, 1.0, NoiseModel::student_t(5.0, scalar(1.0)).unwrap());
        assert_eq!(assert_assumptions(&t5, &pol).fourth_moment.status, CheckStatus::Pass);

        let bank = unit_gaussian().sample(1, 1000);
        let emp = scalar_system(0.5, 1.0, NoiseModel::empirical(bank).unwrap());
        let rep = assert_assumptions(&emp, &pol);
        assert_eq!(rep.noise_density.status, CheckStatus::Unverifiable);
        assert!(rep.all_pass());
    }

    #[test]
    fn deadbeat_average_cost() {
        let sys = scalar_system(0.5, 1.0, unit_gaussian());
        let j = average_cost(&sys, &scalar(1.0), &scalar(1.0), &Policy::linear(scalar(-0.5))).unwrap();
        assert!((j - 1.25).abs() < 1e-14);
    }

    #[test]
    fn lqr_cost_equals_trace_formula() {
        let mut r = rng(31);
        let a = random_matrix(&mut r, 4, 4) * 0.5;
        let b = random_matrix(&mut r, 4, 2);
        let h = random_matrix(&mut r, 4, 4);
        let sys = LtiSystem::new(a.clone(), b.clone(), h, NoiseModel::gaussian(random_psd(&mut r, 4) + DMatrix::identity(4, 4)).unwrap()).unwrap();
        let q = DMatrix::identity(4, 4);
        let rr = DMatrix::identity(2, 2);
        let p = solve_dare(&a, &b, &q, &rr).unwrap();
        let k = riccati_gain(&a, &b, &rr, &p).unwrap();
        let j = average_cost(&sys, &q, &rr, &Policy::linear(k)).unwrap();
        let expect = (&p * sys.input_covariance()).trace();
        assert!((j - expect).abs() <= 1e-8 * expect);
    }

    #[test]
    fn average_cost_invariant_under_similarity() {
        let mut r = rng(32);
        let a = random_stable(&mut r, 3, 0.8);
        let b = random_matrix(&mut r, 3, 2);
        let h = random_matrix(&mut r, 3, 3);
        let noise = NoiseModel::gaussian(DMatrix::identity(3, 3)).unwrap();
        let sys = LtiSystem::new(a.clone(), b.clone(), h.clone(), noise.clone()).unwrap();
        let k = random_matrix(&mut r, 2, 3) * 0.1;
        let pol = Policy::new(k.clone(), DVector::from_vec(vec![1.0, -0.5])).unwrap();
        let q = random_psd(&mut r, 3) + DMatrix::identity(3, 3);
        let rr = DMatrix::identity(2, 2);
        let j = average_cost(&sys, &q, &rr, &pol).unwrap();
        // z = T x
        let t = random_matrix(&mut r, 3, 3) + DMatrix::identity(3, 3) * 3.0;
        let ti = t.clone().try_inverse().unwrap();
        let sys_t = LtiSystem::new(&t * &a * &ti, &t * &b, &t * &h, noise).unwrap();
        let pol_t = Policy::new(&k * &ti, pol.offset.clone()).unwrap();
        let q_t = ti.transpose() * &q * &ti;
        let j_t = average_cost(&sys_t, &symmetrize(&q_t), &rr, &pol_t).unwrap();
        assert!((j - j_t).abs() <= 1e-9 * j);
    }
}
