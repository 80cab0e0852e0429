//! Synthetic experiment generation, whitening initialization, and
//! covariance sets built from segmented recordings.
//!
//! Random draws use [`ChaCha20Rng`] seeded with `seed_from_u64`; see
//! [`GENERATOR_NAME`].

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{AjdError, Result};
use crate::types::{Diagonalizer, SymmetricMatrixSet};

/// Recorded in output metadata so runs can be reproduced.
pub const GENERATOR_NAME: &str = "rand_chacha::ChaCha20Rng/seed_from_u64";

/// Diagonal draws with a smaller minimum entry are redrawn.
pub const MIN_DIAGONAL: f64 = 1e-3;

/// Mixing matrices with a larger condition number are redrawn.
pub const MAX_MIXING_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub p: usize,
    /// Noise level; the noise term is `sigma^2 R R^T`.
    pub sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n: usize, p: usize, sigma: f64, seed: u64) -> Self {
        Self { n, p, sigma, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.p < 1 {
            return Err(AjdError::InvalidArgument(format!(
                "need n >= 1 and p >= 1, got n = {}, p = {}",
                self.n, self.p
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(AjdError::InvalidArgument(format!(
                "sigma must be a finite value >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// The generating model behind a synthetic set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Mixing matrix `A`.
    pub a: DMatrix<f64>,
    /// `n x p` row-major diagonal entries of the `D^i`.
    pub diags: Vec<f64>,
    pub condition_number: f64,
    pub mixing_redraws: usize,
    pub diagonal_redraws: usize,
    pub generator: &'static str,
}

impl GroundTruth {
    pub fn diagonal(&self, i: usize) -> &[f64] {
        let p = self.a.nrows();
        &self.diags[i * p..(i + 1) * p]
    }
}

fn normal_matrix(rng: &mut ChaCha20Rng, p: usize) -> DMatrix<f64> {
    // filled column by column; the order is part of the reproducibility contract
    DMatrix::from_fn(p, p, |_, _| rng.sample(StandardNormal))
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Draws `C^i = A D^i A^T + sigma^2 R^i R^i^T` with uniform `[0, 1)` diagonal
/// entries in `D^i` and standard normal entries in `A` and every `R^i`.
pub fn gen_synthetic(config: &SynthConfig) -> Result<(SymmetricMatrixSet, GroundTruth)> {
    config.validate()?;
    let SynthConfig { n, p, sigma, seed } = *config;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut mixing_redraws = 0;
    let (a, cond) = loop {
        let a = normal_matrix(&mut rng, p);
        let cond = condition_number(&a);
        if cond <= MAX_MIXING_CONDITION {
            break (a, cond);
        }
        mixing_redraws += 1;
    };

    let mut diags = Vec::with_capacity(n * p);
    let mut diagonal_redraws = 0;
    let mut data = Vec::with_capacity(n * p * p);
    let sigma2 = sigma * sigma;
    for _ in 0..n {
        let diag = loop {
            let d: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
            if d.iter().all(|&v| v >= MIN_DIAGONAL) {
                break d;
            }
            diagonal_redraws += 1;
        };
        let scaled = DMatrix::from_fn(p, p, |r, c| a[(r, c)] * diag[c]);
        let mut c = &scaled * a.transpose();
        if sigma > 0.0 {
            let r = normal_matrix(&mut rng, p);
            c += (&r * r.transpose()) * sigma2;
        }
        data.extend(c.transpose().iter().copied());
        diags.extend(diag);
    }
    let set = SymmetricMatrixSet::from_row_major(n, p, data)?;
    Ok((
        set,
        GroundTruth {
            a,
            diags,
            condition_number: cond,
            mixing_redraws,
            diagonal_redraws,
            generator: GENERATOR_NAME,
        },
    ))
}

/// `B0 = Λ^{-1/2} P^T` from the eigendecomposition `P Λ P^T` of the mean
/// matrix, so that `B0 mean(C) B0^T = I`.
///
/// Eigenvalues are sorted in decreasing order and each eigenvector is signed
/// so that its largest-magnitude entry is positive.
pub fn whitener(cset: &SymmetricMatrixSet) -> Result<Diagonalizer> {
    let p = cset.p();
    let eig = SymmetricEigen::new(cset.mean());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    if let Some(&smallest) = order.last() {
        let eigenvalue = eig.eigenvalues[smallest];
        if !(eigenvalue > 0.0) {
            return Err(AjdError::NonPositiveMean { eigenvalue });
        }
    }
    let mut b = DMatrix::zeros(p, p);
    for (row, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / eig.eigenvalues[k].sqrt();
        for col in 0..p {
            b[(row, col)] = v[col] * scale;
        }
    }
    Diagonalizer::new(b)
}

/// `C^i = (1/T) X_i X_i^T` for each `p x T` segment.
///
/// Segments shorter than `p` samples give rank-deficient matrices; they are
/// accepted with a warning and will fail [`crate::validate_spd`].
pub fn covariances_from_segments(segments: &[DMatrix<f64>]) -> Result<SymmetricMatrixSet> {
    let Some(first) = segments.first() else {
        return Err(AjdError::InvalidArgument("no segments".into()));
    };
    let p = first.nrows();
    let mut matrices = Vec::with_capacity(segments.len());
    for (i, x) in segments.iter().enumerate() {
        if x.nrows() != p {
            return Err(AjdError::DimensionMismatch {
                expected: format!("{p} channels"),
                actual: format!("{} channels in segment {i}", x.nrows()),
            });
        }
        let t = x.ncols();
        if t == 0 {
            return Err(AjdError::InvalidArgument(format!("segment {i} has no samples")));
        }
        if t < p {
            log::warn!("segment {i} has {t} samples for {p} channels; covariance is singular");
        }
        matrices.push((x * x.transpose()) / t as f64);
    }
    SymmetricMatrixSet::from_matrices(&matrices)
}

/// Multichannel recordings for a covariance-based experiment: `p` Gaussian
/// sources whose power changes from segment to segment, mixed by a random
/// matrix, plus white sensor noise of standard deviation `noise`.
///
/// Returns `n` segments of `t` samples each, and the mixing matrix.
pub fn gen_segment_signals(
    n: usize,
    p: usize,
    t: usize,
    noise: f64,
    seed: u64,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    if n < 1 || p < 1 || t < 1 {
        return Err(AjdError::InvalidArgument(format!(
            "need n, p, t >= 1, got n = {n}, p = {p}, t = {t}"
        )));
    }
    if !(noise >= 0.0) {
        return Err(AjdError::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let a = loop {
        let a = normal_matrix(&mut rng, p);
        if condition_number(&a) <= MAX_MIXING_CONDITION {
            break a;
        }
    };
    let mut segments = Vec::with_capacity(n);
    for _ in 0..n {
        let powers: Vec<f64> = (0..p).map(|_| rng.random_range(0.1..1.0f64).sqrt()).collect();
        let sources = DMatrix::from_fn(p, t, |r, _| powers[r] * rng.sample::<f64, _>(StandardNormal));
        let mut x = &a * sources;
        if noise > 0.0 {
            x += DMatrix::from_fn(p, t, |_, _| noise * rng.sample::<f64, _>(StandardNormal));
        }
        segments.push(x);
    }
    Ok((segments, a))
}
