#![allow(dead_code)]

use jointdiag::nalgebra::DMatrix;
use jointdiag::SymmetricMatrixSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `n` random SPD matrices `M M^T / p + 0.1 I`.
pub fn random_spd_set(rng: &mut ChaCha8Rng, n: usize, p: usize) -> SymmetricMatrixSet {
    let mats: Vec<DMatrix<f64>> = (0..n)
        .map(|_| {
            let m = normal(rng, p, p);
            (&m * m.transpose()) / p as f64 + DMatrix::identity(p, p) * 0.1
        })
        .collect();
    SymmetricMatrixSet::from_matrices(&mats).unwrap()
}

/// A well-conditioned random matrix near the identity.
pub fn random_b(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    DMatrix::identity(p, p) + normal(rng, p, p) * 0.3
}

pub fn unit(p: usize, a: usize, b: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(p, p);
    e[(a, b)] = 1.0;
    e
}

pub fn random_offdiag(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let mut g = normal(rng, p, p);
    g.fill_diagonal(0.0);
    g
}

pub fn random_diagonal_set(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Vec<DMatrix<f64>> {
    (0..n)
        .map(|_| {
            let d: Vec<f64> = (0..p).map(|_| rng.random_range(0.1..2.0)).collect();
            DMatrix::from_diagonal(&jointdiag::nalgebra::DVector::from_vec(d))
        })
        .collect()
}
