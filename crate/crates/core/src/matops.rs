//! Dense matrix kernels: discrete Lyapunov and Riccati solvers, spectra,
//! controllability and the closed-loop spectral density.
//!
//! Everything here is a pure function of its arguments.

use nalgebra::{Cholesky, Complex, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// "Schur stable" means `rho(A) <= 1 - margin`.
pub const DEFAULT_STABILITY_MARGIN: f64 = 1e-9;

/// Largest dimension solved by the vectorized (Kronecker) Lyapunov route.
pub const KRONECKER_MAX_DIM: usize = 30;

pub const DARE_TOLERANCE: f64 = 1e-12;
pub const DARE_MAX_ITERATIONS: usize = 200_000;

const SYMMETRY_TOLERANCE: f64 = 1e-12;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest entry of `|M - M^T|` relative to `max(1, max|M|)`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    max_abs(&(m - m.transpose())) / max_abs(m).max(1.0)
}

pub(crate) fn require_square(name: &str, m: &DMatrix<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::dims(format!(
            "{name} must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

pub(crate) fn require_symmetric(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    let asym = asymmetry(m);
    if asym > tol {
        return Err(Error::NonSymmetricInput { asymmetry: asym });
    }
    Ok(())
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols() && Cholesky::new(symmetrize(m)).is_some()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Maximum eigenvalue modulus. Complex eigenvalues come from the real Schur
/// form; only their moduli are exposed.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn is_schur_stable(a: &DMatrix<f64>, margin: f64) -> bool {
    let rho = spectral_radius(a);
    rho.is_finite() && rho <= 1.0 - margin
}

fn require_stable(a: &DMatrix<f64>, margin: f64) -> Result<()> {
    let rho = spectral_radius(a);
    if !(rho.is_finite() && rho <= 1.0 - margin) {
        return Err(Error::NotSchurStable { rho, margin });
    }
    Ok(())
}

/// Solves `X = A X A^T + S` for Schur-stable `A` and symmetric `S`.
pub fn solve_dlyap(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    solve_dlyap_with_margin(a, s, DEFAULT_STABILITY_MARGIN)
}

pub fn solve_dlyap_with_margin(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    margin: f64,
) -> Result<DMatrix<f64>> {
    let n = require_square("A", a)?;
    if s.shape() != (n, n) {
        return Err(Error::dims(format!(
            "S must be {n}x{n}, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    require_symmetric(s, 1e-10)?;
    require_stable(a, margin)?;
    let s = symmetrize(s);
    let x = if n <= KRONECKER_MAX_DIM {
        dlyap_kronecker(a, &s)?
    } else {
        dlyap_doubling(a, &s)
    };
    Ok(symmetrize(&x))
}

/// `(I - A (x) A) vec(X) = vec(S)` with column-major vectorization, plus one
/// step of iterative refinement.
fn dlyap_kronecker(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let nn = n * n;
    let mut lhs = DMatrix::<f64>::identity(nn, nn);
    for j in 0..n {
        for i in 0..n {
            let row = i + n * j;
            for l in 0..n {
                let ajl = a[(j, l)];
                if ajl == 0.0 {
                    continue;
                }
                for k in 0..n {
                    lhs[(row, k + n * l)] -= a[(i, k)] * ajl;
                }
            }
        }
    }
    let rhs = DVector::from_column_slice(s.as_slice());
    let lu = lhs.lu();
    let mut vec_x = lu.solve(&rhs).ok_or(Error::Singular("dlyap"))?;
    let x = DMatrix::from_column_slice(n, n, vec_x.as_slice());
    let residual = s - (&x - a * &x * a.transpose());
    let correction = lu
        .solve(&DVector::from_column_slice(residual.as_slice()))
        .ok_or(Error::Singular("dlyap"))?;
    vec_x += correction;
    Ok(DMatrix::from_column_slice(n, n, vec_x.as_slice()))
}

/// `X <- X + A_k X A_k^T`, `A_k <- A_k^2`; converges quadratically in the
/// number of squarings.
fn dlyap_doubling(a: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = s.clone();
    let mut ak = a.clone();
    for _ in 0..128 {
        let inc = &ak * &x * ak.transpose();
        x += &inc;
        ak = &ak * &ak;
        if inc.norm() <= 1e-17 * x.norm().max(f64::MIN_POSITIVE) || ak.norm() < 1e-300 {
            break;
        }
    }
    x
}

/// Stabilizing solution of `P = A^T P A + Q - A^T P B (R + B^T P B)^{-1} B^T P A`
/// by Riccati fixed-point iteration from `P_0 = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = require_square("A", a)?;
    let m = b.ncols();
    if b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::dims(format!(
            "DARE expects A {n}x{n}, B {n}x{m}, Q {n}x{n}, R {m}x{m}"
        )));
    }
    require_symmetric(q, 1e-10)?;
    require_symmetric(r, 1e-10)?;
    if m > 0 && !is_positive_definite(r) {
        return Err(Error::invalid("R must be positive definite"));
    }
    let q = symmetrize(q);
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..DARE_MAX_ITERATIONS {
        let pa = &p * a;
        let mut next = &at * &pa + &q;
        if m > 0 {
            let g = r + &bt * &p * b;
            let chol = Cholesky::new(symmetrize(&g)).ok_or(Error::Singular("dare"))?;
            let bpa = &bt * &pa;
            next -= bpa.transpose() * chol.solve(&bpa);
        }
        let next = symmetrize(&next);
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        let change = (&next - &p).norm() / p.norm().max(f64::MIN_POSITIVE);
        p = next;
        if change <= DARE_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "Riccati iteration",
            iterations: DARE_MAX_ITERATIONS,
        });
    }
    let k = riccati_gain(a, b, r, &p)?;
    if !is_schur_stable(&(a + b * k), DEFAULT_STABILITY_MARGIN) {
        return Err(Error::NoConvergence {
            what: "Riccati iteration (non-stabilizing fixed point)",
            iterations: DARE_MAX_ITERATIONS,
        });
    }
    Ok(p)
}

/// `K = -(R + B^T P B)^{-1} B^T P A`.
pub fn riccati_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let bt = b.transpose();
    let g = r + &bt * p * b;
    let chol = Cholesky::new(symmetrize(&g)).ok_or(Error::Singular("Riccati gain"))?;
    Ok(-chol.solve(&(&bt * p * a)))
}

/// Relative DARE residual `||A^T P A - P + Q - A^T P B G^{-1} B^T P A||_F / ||P||_F`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let bt = b.transpose();
    let g = r + &bt * p * b;
    let bpa = &bt * p * a;
    let inv = g.try_inverse().unwrap_or_else(|| DMatrix::zeros(b.ncols(), b.ncols()));
    let res = a.transpose() * p * a - p + q - bpa.transpose() * inv * &bpa;
    res.norm() / p.norm().max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub value: f64,
    pub vector: DVector<f64>,
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub pairs: Vec<EigenPair>,
}

impl SpectrumResult {
    pub fn values(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.value).collect()
    }

    /// `sum_j lambda_j v_j v_j^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.pairs.first().map_or(0, |p| p.vector.len());
        self.pairs.iter().fold(DMatrix::zeros(n, n), |acc, p| {
            acc + &p.vector * p.vector.transpose() * p.value
        })
    }
}

pub fn sym_eig(m: &DMatrix<f64>) -> Result<SpectrumResult> {
    require_square("M", m)?;
    require_symmetric(m, SYMMETRY_TOLERANCE)?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut pairs: Vec<EigenPair> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .map(|(&value, v)| {
            let v = v.into_owned();
            let norm = v.norm();
            EigenPair {
                value,
                vector: v / norm,
            }
        })
        .collect();
    pairs.sort_by(|x, y| y.value.total_cmp(&x.value));
    Ok(SpectrumResult { pairs })
}

/// `Sigma_Gamma(omega) = (I - e^{i omega} A_K)^{-1} H Sigma_W H^T (I - e^{-i omega} A_K^T)^{-1}`.
pub fn spectral_density(
    a_k: &DMatrix<f64>,
    h: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    omega: f64,
) -> Result<DMatrix<Complex<f64>>> {
    let n = require_square("A_K", a_k)?;
    if h.nrows() != n || sigma_w.shape() != (h.ncols(), h.ncols()) {
        return Err(Error::dims("spectral_density expects H n x d and Sigma_W d x d"));
    }
    let s = h * sigma_w * h.transpose();
    spectral_density_from_input(a_k, &s, omega)
}

/// Same as [`spectral_density`] with the input covariance `S = H Sigma_W H^T`
/// already formed.
pub fn spectral_density_from_input(
    a_k: &DMatrix<f64>,
    s: &DMatrix<f64>,
    omega: f64,
) -> Result<DMatrix<Complex<f64>>> {
    let n = require_square("A_K", a_k)?;
    require_stable(a_k, DEFAULT_STABILITY_MARGIN)?;
    let phase = Complex::new(omega.cos(), omega.sin());
    let resolvent_arg = DMatrix::<Complex<f64>>::identity(n, n) - a_k.map(|v| phase * v);
    let lu = resolvent_arg.lu();
    let sc = s.map(|v| Complex::new(v, 0.0));
    let left = lu.solve(&sc).ok_or(Error::Singular("spectral density"))?;
    let right = lu
        .solve(&left.adjoint())
        .ok_or(Error::Singular("spectral density"))?;
    let out = right.adjoint();
    Ok((&out + out.adjoint()).map(|z| z * 0.5))
}

/// Numerical rank of `[H, AH, ..., A^{n-1} H]` with singular-value threshold
/// `n * sigma_max * 1e-12`.
pub fn controllability_rank(a: &DMatrix<f64>, h: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let d = h.ncols();
    if n == 0 || d == 0 || h.nrows() != n {
        return 0;
    }
    let mut ctrb = DMatrix::<f64>::zeros(n, n * d);
    let mut block = h.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * d), (n, d)).copy_from(&block);
        block = a * block;
    }
    let sv = ctrb.svd(false, false).singular_values;
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let threshold = n as f64 * sigma_max * 1e-12;
    sv.iter().filter(|&&s| s > threshold).count()
}

/// Numerical rank of a rectangular matrix (same threshold rule).
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let threshold = m.nrows().max(m.ncols()) as f64 * sigma_max * 1e-12;
    sv.iter().filter(|&&s| s > threshold).count()
}
