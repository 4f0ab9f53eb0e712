//! Zero-mean i.i.d. process-noise models and the higher-moment functionals
//! `M_3` and `m_4` that enter the asymptotic conditional variance.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{require_square, require_symmetric, symmetrize};
use crate::rng::{stream_rng, StreamRng};

/// Draw count for Monte Carlo moment estimates.
pub const DEFAULT_MOMENT_DRAWS: usize = 1_000_000;

#[derive(Debug, Clone)]
pub enum NoiseKind {
    Gaussian,
    /// Multivariate Student-t parameterized by its covariance.
    StudentT { nu: f64 },
    /// Centered bank of observed noise vectors, resampled uniformly.
    Empirical { samples: Arc<Vec<DVector<f64>>> },
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    kind: NoiseKind,
    cov: DMatrix<f64>,
    /// Lower Cholesky factor of the sampling scale (Gaussian: `Sigma_W`;
    /// Student-t: `Sigma_W (nu - 2) / nu`).
    scale_chol: DMatrix<f64>,
    chi2: Option<ChiSquared<f64>>,
}

/// A Monte Carlo or exact expectation with its standard error (zero when exact).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate<T> {
    pub value: T,
    pub std_err: T,
}

/// `M_3(Q) = E[H W tr(Q H (W W^T - Sigma_W) H^T)]` and
/// `m_4(Q) = E[tr(Q H (W W^T - Sigma_W) H^T)^2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentFunctionals {
    pub m3: DVector<f64>,
    pub m4: f64,
    /// Standard errors `(per-component M_3, m_4)`, present for estimated values.
    pub estimator_sd: Option<(DVector<f64>, f64)>,
}

fn validate_cov(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_square("noise covariance", cov)?;
    require_symmetric(cov, 1e-10)?;
    let cov = symmetrize(cov);
    if Cholesky::new(cov.clone()).is_none() {
        return Err(Error::invalid("noise covariance must be positive definite"));
    }
    Ok(cov)
}

impl NoiseModel {
    pub fn gaussian(cov: DMatrix<f64>) -> Result<Self> {
        let cov = validate_cov(&cov)?;
        let scale_chol = Cholesky::new(cov.clone()).expect("validated").l();
        Ok(Self {
            kind: NoiseKind::Gaussian,
            cov,
            scale_chol,
            chi2: None,
        })
    }

    /// Student-t with `nu` degrees of freedom and covariance `cov`; requires
    /// `nu > 2` for the covariance to exist.
    pub fn student_t(nu: f64, cov: DMatrix<f64>) -> Result<Self> {
        if !(nu.is_finite() && nu > 2.0) {
            return Err(Error::MomentUndefined(format!(
                "Student-t covariance requires nu > 2, got nu = {nu}"
            )));
        }
        let cov = validate_cov(&cov)?;
        let scale = &cov * ((nu - 2.0) / nu);
        let scale_chol = Cholesky::new(scale).expect("validated").l();
        let chi2 = ChiSquared::new(nu).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self {
            kind: NoiseKind::StudentT { nu },
            cov,
            scale_chol,
            chi2: Some(chi2),
        })
    }

    /// Builds an empirical model from a bank of samples, centered exactly.
    pub fn empirical(samples: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid("empirical noise bank is empty"));
        };
        let d = first.len();
        if d == 0 || samples.iter().any(|w| w.len() != d) {
            return Err(Error::dims("empirical noise samples must share one positive dimension"));
        }
        if samples.len() < 2 {
            return Err(Error::invalid("empirical noise bank needs at least two samples"));
        }
        let count = samples.len() as f64;
        let mean = samples.iter().fold(DVector::zeros(d), |acc, w| acc + w) / count;
        let centered: Vec<DVector<f64>> = samples.into_iter().map(|w| w - &mean).collect();
        let cov = centered
            .iter()
            .fold(DMatrix::zeros(d, d), |acc, w| acc + w * w.transpose())
            / count;
        let cov = validate_cov(&cov)?;
        let scale_chol = Cholesky::new(cov.clone()).expect("validated").l();
        Ok(Self {
            kind: NoiseKind::Empirical {
                samples: Arc::new(centered),
            },
            cov,
            scale_chol,
            chi2: None,
        })
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::StudentT { .. } => "student_t",
            NoiseKind::Empirical { .. } => "empirical",
        }
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, NoiseKind::Gaussian)
    }

    /// `Sigma_W`: exact for the parametric models, the bank covariance for
    /// empirical ones.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn third_moment_finite(&self) -> bool {
        match self.kind {
            NoiseKind::StudentT { nu } => nu > 3.0,
            _ => true,
        }
    }

    pub fn fourth_moment_finite(&self) -> bool {
        match self.kind {
            NoiseKind::StudentT { nu } => nu > 4.0,
            _ => true,
        }
    }

    /// One draw into `out` (length `d`).
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut DVector<f64>) {
        match &self.kind {
            NoiseKind::Empirical { samples } => {
                let idx = rng.random_range(0..samples.len());
                out.copy_from(&samples[idx]);
            }
            kind => {
                let d = self.dim();
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                out.gemv(1.0, &self.scale_chol, &z, 0.0);
                if let NoiseKind::StudentT { nu } = kind {
                    let g = self.chi2.as_ref().expect("student-t has chi2").sample(rng);
                    *out /= (g / nu).sqrt();
                }
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.draw_into(rng, &mut out);
        out
    }

    /// `count` draws from stream `(seed, 0)`.
    pub fn sample(&self, seed: u64, count: usize) -> Vec<DVector<f64>> {
        let mut rng = stream_rng(seed, 0);
        (0..count).map(|_| self.draw(&mut rng)).collect()
    }

    pub fn rng(&self, seed: u64, stream: u64) -> StreamRng {
        stream_rng(seed, stream)
    }

    fn check_dims(&self, q: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<()> {
        let n = h.nrows();
        if h.ncols() != self.dim() || q.shape() != (n, n) {
            return Err(Error::dims(format!(
                "moment functional expects H n x {} and Q n x n, got H {}x{} and Q {}x{}",
                self.dim(),
                h.nrows(),
                h.ncols(),
                q.nrows(),
                q.ncols()
            )));
        }
        Ok(())
    }

    /// `M_3(Q)`. Zero for the symmetric parametric laws; exact bank average
    /// (with the standard error of the mean) for empirical models.
    pub fn m3_functional(&self, q: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<MomentEstimate<DVector<f64>>> {
        self.check_dims(q, h)?;
        if !self.third_moment_finite() {
            return Err(Error::MomentUndefined(
                "M_3 requires a finite third moment (Student-t needs nu > 3)".into(),
            ));
        }
        let n = h.nrows();
        match &self.kind {
            NoiseKind::Gaussian | NoiseKind::StudentT { .. } => Ok(MomentEstimate {
                value: DVector::zeros(n),
                std_err: DVector::zeros(n),
            }),
            NoiseKind::Empirical { samples } => {
                let t = h.transpose() * q * h;
                let tr = (&t * &self.cov).trace();
                let (mean, se) = bank_mean(samples.iter().map(|w| {
                    let c = w.dot(&(&t * w)) - tr;
                    (h * w) * c
                }), n);
                Ok(MomentEstimate { value: mean, std_err: se })
            }
        }
    }

    /// `m_4(Q) = Var(W^T T W)` with `T = H^T Q H`.
    ///
    /// Gaussian: `2 tr((T Sigma)^2)`. Student-t (nu > 4):
    /// `(nu-2)/(nu-4) [tr(T Sigma)^2 + 2 tr((T Sigma)^2)] - tr(T Sigma)^2`.
    /// Empirical: exact bank average with standard error.
    pub fn m4_functional(&self, q: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<MomentEstimate<f64>> {
        self.check_dims(q, h)?;
        if !self.fourth_moment_finite() {
            return Err(Error::MomentUndefined(
                "m_4 requires a finite fourth moment (Student-t needs nu > 4)".into(),
            ));
        }
        let t = h.transpose() * q * h;
        let ts = &t * &self.cov;
        let tr = ts.trace();
        let tr_sq = (&ts * &ts).trace();
        match &self.kind {
            NoiseKind::Gaussian => Ok(MomentEstimate {
                value: 2.0 * tr_sq,
                std_err: 0.0,
            }),
            NoiseKind::StudentT { nu } => Ok(MomentEstimate {
                value: (nu - 2.0) / (nu - 4.0) * (tr * tr + 2.0 * tr_sq) - tr * tr,
                std_err: 0.0,
            }),
            NoiseKind::Empirical { samples } => {
                let (mean, se) = bank_mean(
                    samples.iter().map(|w| {
                        let c = w.dot(&(&t * w)) - tr;
                        DVector::from_element(1, c * c)
                    }),
                    1,
                );
                Ok(MomentEstimate {
                    value: mean[0],
                    std_err: se[0],
                })
            }
        }
    }

    pub fn moment_functionals(&self, q: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<MomentFunctionals> {
        let m3 = self.m3_functional(q, h)?;
        let m4 = self.m4_functional(q, h)?;
        let estimator_sd = match self.kind {
            NoiseKind::Empirical { .. } => Some((m3.std_err, m4.std_err)),
            _ => None,
        };
        Ok(MomentFunctionals {
            m3: m3.value,
            m4: m4.value,
            estimator_sd,
        })
    }

    /// Plain Monte Carlo estimate of both functionals from `draws` fresh samples.
    pub fn monte_carlo_moments(
        &self,
        q: &DMatrix<f64>,
        h: &DMatrix<f64>,
        draws: usize,
        seed: u64,
    ) -> Result<MomentFunctionals> {
        self.check_dims(q, h)?;
        if draws < 2 {
            return Err(Error::invalid("Monte Carlo moments need at least two draws"));
        }
        let n = h.nrows();
        let t = h.transpose() * q * h;
        let tr = (&t * &self.cov).trace();
        let mut rng = stream_rng(seed, 0);
        let mut w = DVector::zeros(self.dim());
        let (mean, se) = bank_mean(
            (0..draws).map(|_| {
                self.draw_into(&mut rng, &mut w);
                let c = w.dot(&(&t * &w)) - tr;
                let mut row = DVector::zeros(n + 1);
                row.rows_mut(0, n).copy_from(&((h * &w) * c));
                row[n] = c * c;
                row
            }),
            n + 1,
        );
        Ok(MomentFunctionals {
            m3: mean.rows(0, n).into_owned(),
            m4: mean[n],
            estimator_sd: Some((se.rows(0, n).into_owned(), se[n])),
        })
    }
}

/// Componentwise mean and standard error of the mean.
fn bank_mean(values: impl Iterator<Item = DVector<f64>>, len: usize) -> (DVector<f64>, DVector<f64>) {
    let mut count = 0usize;
    let mut sum = DVector::zeros(len);
    let mut sum_sq = DVector::zeros(len);
    for v in values {
        sum += &v;
        sum_sq += v.component_mul(&v);
        count += 1;
    }
    let c = count as f64;
    let mean = sum / c;
    let var = (sum_sq / c - mean.component_mul(&mean)).map(|v| v.max(0.0)) * (c / (c - 1.0));
    let se = var.map(|v| (v / c).sqrt());
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_matrix, random_psd, rng};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn sample_cov(samples: &[DVector<f64>]) -> DMatrix<f64> {
        let d = samples[0].len();
        let c = samples.len() as f64;
        samples.iter().fold(DMatrix::zeros(d, d), |acc, w| acc + w * w.transpose()) / c
    }

    #[test]
    fn gaussian_sample_variance() {
        let model = NoiseModel::gaussian(scalar(1.0)).unwrap();
        let s = model.sample(11, 1_000_000);
        let var = sample_cov(&s)[(0, 0)];
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn student_t_sample_variance() {
        let model = NoiseModel::student_t(5.0, scalar(1.0)).unwrap();
        let s = model.sample(12, 1_000_000);
        let var = sample_cov(&s)[(0, 0)];
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn student_t_multivariate_covariance() {
        // kappa = 3 for nu = 8: Var(W_i W_j) for a t law inflates the Gaussian
        // value by (nu-2)/(nu-4) = 1.5, plus margin for the matrix norm.
        let mut r = rng(13);
        let cov = random_psd(&mut r, 3) + DMatrix::identity(3, 3);
        let model = NoiseModel::student_t(8.0, cov.clone()).unwrap();
        let count = 400_000;
        let s = model.sample(14, count);
        let rel = (sample_cov(&s) - &cov).norm() / cov.norm();
        let kappa = 3.0;
        assert!(rel <= 3.0 * (2.0 / count as f64).sqrt() * kappa, "{rel}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let model = NoiseModel::student_t(5.0, DMatrix::identity(2, 2)).unwrap();
        assert_eq!(model.sample(3, 100), model.sample(3, 100));
        assert_ne!(model.sample(3, 100), model.sample(4, 100));
    }

    #[test]
    fn covariance_pins() {
        let g = NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap();
        assert_eq!(g.covariance(), &DMatrix::<f64>::identity(2, 2));
        let t = NoiseModel::student_t(5.0, scalar(2.0)).unwrap();
        assert_eq!(t.covariance()[(0, 0)], 2.0);
        assert!(matches!(
            NoiseModel::student_t(2.0, scalar(1.0)),
            Err(Error::MomentUndefined(_))
        ));
        let bank = NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap().sample(5, 1_000_000);
        let e = NoiseModel::empirical(bank).unwrap();
        assert!((e.covariance() - DMatrix::<f64>::identity(2, 2)).abs().max() < 0.01);
    }

    #[test]
    fn empirical_bank_is_centered() {
        let bank: Vec<DVector<f64>> = (0..10).map(|i| DVector::from_vec(vec![i as f64 + 5.0])).collect();
        let e = NoiseModel::empirical(bank).unwrap();
        let NoiseKind::Empirical { samples } = e.kind() else { unreachable!() };
        let mean: f64 = samples.iter().map(|w| w[0]).sum::<f64>() / 10.0;
        assert!(mean.abs() < 1e-14);
        assert!((e.covariance()[(0, 0)] - 8.25).abs() < 1e-12);
    }

    #[test]
    fn symmetric_laws_have_zero_m3() {
        let mut r = rng(15);
        let h = random_matrix(&mut r, 3, 2);
        let q = random_psd(&mut r, 3);
        for model in [
            NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap(),
            NoiseModel::student_t(5.0, DMatrix::identity(2, 2)).unwrap(),
        ] {
            let m3 = model.m3_functional(&q, &h).unwrap();
            assert_eq!(m3.value, DVector::zeros(3));
        }
    }

    #[test]
    fn skewed_empirical_m3_matches_monte_carlo() {
        // shifted exponential draws, centered at load
        use rand_distr::Exp;
        let mut r = rng(16);
        let exp = Exp::new(1.0).unwrap();
        let bank: Vec<DVector<f64>> = (0..1_000_000)
            .map(|_| DVector::from_vec(vec![exp.sample(&mut r) - 1.0, exp.sample(&mut r) - 1.0]))
            .collect();
        let model = NoiseModel::empirical(bank).unwrap();
        let h = DMatrix::identity(2, 2);
        let q = DMatrix::identity(2, 2);
        let m3 = model.m3_functional(&q, &h).unwrap();
        assert!(m3.value.norm() > 1.0);
        let mc = model.monte_carlo_moments(&q, &h, 1_000_000, 17).unwrap();
        let (se3, _) = mc.estimator_sd.unwrap();
        for i in 0..2 {
            let tol = 3.0 * (se3[i].powi(2) + m3.std_err[i].powi(2)).sqrt();
            assert!((m3.value[i] - mc.m3[i]).abs() <= tol);
        }
    }

    #[test]
    fn m4_pins() {
        let one = scalar(1.0);
        let g = NoiseModel::gaussian(one.clone()).unwrap();
        assert!((g.m4_functional(&one, &one).unwrap().value - 2.0).abs() < 1e-14);
        let t = NoiseModel::student_t(5.0, one.clone()).unwrap();
        assert!((t.m4_functional(&one, &one).unwrap().value - 8.0).abs() < 1e-12);
        assert_eq!(g.m4_functional(&scalar(0.0), &one).unwrap().value, 0.0);
        let t3 = NoiseModel::student_t(3.0, one.clone()).unwrap();
        assert!(matches!(
            t3.m4_functional(&one, &one),
            Err(Error::MomentUndefined(_))
        ));
        assert!(!t3.fourth_moment_finite());
    }

    #[test]
    fn scalar_m4_matches_monte_carlo() {
        let one = scalar(1.0);
        let g = NoiseModel::gaussian(one.clone()).unwrap();
        let mc = g.monte_carlo_moments(&one, &one, 1_000_000, 18).unwrap();
        assert!((mc.m4 - 2.0).abs() <= 4.0 * mc.estimator_sd.unwrap().1);
        // nu = 8 so the estimator has finite variance
        let t = NoiseModel::student_t(8.0, one.clone()).unwrap();
        let exact = t.m4_functional(&one, &one).unwrap().value;
        // E W^4 = 3 (nu-2)/(nu-4) = 4.5
        assert!((exact - 3.5).abs() < 1e-12);
        let mc = t.monte_carlo_moments(&one, &one, 2_000_000, 19).unwrap();
        assert!((mc.m4 - exact).abs() <= 4.0 * mc.estimator_sd.unwrap().1);
    }

    #[test]
    fn gaussian_m4_matches_large_monte_carlo() {
        let mut r = rng(20);
        for d in [2usize, 4, 6] {
            let cov = random_psd(&mut r, d) + DMatrix::identity(d, d) * 0.5;
            let h = DMatrix::identity(d, d);
            let q = random_psd(&mut r, d);
            let g = NoiseModel::gaussian(cov).unwrap();
            let exact = g.m4_functional(&q, &h).unwrap().value;
            let mc = g.monte_carlo_moments(&q, &h, 10_000_000, 21 + d as u64).unwrap();
            let se = mc.estimator_sd.unwrap().1;
            assert!((mc.m4 - exact).abs() <= 4.0 * se, "d={d} exact={exact} mc={} se={se}", mc.m4);
        }
    }

    #[test]
    fn functionals_are_homogeneous_in_q() {
        let mut r = rng(22);
        let h = random_matrix(&mut r, 3, 3);
        let q = random_psd(&mut r, 3);
        let bank = NoiseModel::student_t(6.0, DMatrix::identity(3, 3)).unwrap().sample(23, 20_000);
        for model in [
            NoiseModel::gaussian(random_psd(&mut r, 3) + DMatrix::identity(3, 3)).unwrap(),
            NoiseModel::student_t(7.0, DMatrix::identity(3, 3)).unwrap(),
            NoiseModel::empirical(bank).unwrap(),
        ] {
            let base = model.moment_functionals(&q, &h).unwrap();
            let c = 2.5;
            let scaled = model.moment_functionals(&(&q * c), &h).unwrap();
            assert!((scaled.m4 - c * c * base.m4).abs() <= 1e-10 * scaled.m4.max(1.0));
            assert!((&scaled.m3 - &base.m3 * c).norm() <= 1e-10 * scaled.m3.norm().max(1.0));
        }
    }
}
