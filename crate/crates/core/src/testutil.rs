//! Seeded random matrices for unit tests.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matops::spectral_radius;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `G G^T / n`, PSD and almost surely PD.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n);
    &g * g.transpose() / n as f64
}

/// Random matrix rescaled to the given spectral radius.
pub fn random_stable(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    let rho = spectral_radius(&a);
    a * (radius / rho)
}
