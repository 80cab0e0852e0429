//! The joint-diagonality criterion
//!
//! ```text
//! L(B) = 1/(2n) sum_i [ log det diag(B C^i B^T) - log det(B C^i B^T) ]
//! ```
//!
//! together with its relative gradient and relative Hessian (for updates of
//! the form `B <- (I + E) B`), and the sparse Hessian approximation that is
//! exact whenever every `D^i` is diagonal.
//!
//! Out-of-domain evaluations of the loss return [`INFINITE_LOSS`] instead of
//! an error so a line search can treat them as non-improving.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{AjdError, Result};
use crate::types::{transform_with, SymmetricMatrixSet, TransformedSet};

/// Value of the loss outside its domain.
pub const INFINITE_LOSS: f64 = f64::INFINITY;

/// Blocks with `Γ_ab Γ_ba - 1` below this are solved with the identity.
pub const DEGENERATE_BLOCK_THRESHOLD: f64 = 1e-9;

fn check_diagonals(dset: &TransformedSet) -> Result<()> {
    for i in 0..dset.n() {
        if let Some((entry, value)) = dset.diagonal(i).enumerate().find(|&(_, v)| !(v > 0.0)) {
            return Err(AjdError::OutsideDomain {
                matrix: i,
                entry,
                value,
            });
        }
    }
    Ok(())
}

/// `log det M` through a Cholesky factorization, `None` if `M` is not
/// positive definite.
pub fn log_det_spd(m: DMatrix<f64>) -> Option<f64> {
    let chol = Cholesky::new(m)?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|l| l.ln()).sum::<f64>())
}

/// `sum_a log D_aa - log det D` for one symmetric matrix.
///
/// Factorizes the unit-diagonal rescaling `R = S D S`, `S = diag(D)^{-1/2}`,
/// whose pivots satisfy `L_jj^2 = 1 - s_j` with `s_j = sum_{k<j} L_jk^2`.
/// Summing `-ln_1p(-s_j)` keeps full relative accuracy when `D` is nearly
/// diagonal and is non-negative term by term.
fn diagonal_gap(d: nalgebra::DMatrixView<'_, f64>) -> Option<f64> {
    let p = d.nrows();
    let mut scale = Vec::with_capacity(p);
    for a in 0..p {
        let v = d[(a, a)];
        if !(v > 0.0) {
            return None;
        }
        scale.push(1.0 / v.sqrt());
    }
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut gap = 0.0;
    for j in 0..p {
        let s: f64 = (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum();
        if !(s < 1.0) {
            return None;
        }
        let ljj = (1.0 - s).sqrt();
        gap -= (-s).ln_1p();
        l[(j, j)] = ljj;
        for i in (j + 1)..p {
            let r = d[(i, j)] * scale[i] * scale[j];
            let dot: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            l[(i, j)] = (r - dot) / ljj;
        }
    }
    Some(gap)
}

/// Loss evaluated directly by factorizing every `D^i`.
pub fn loss(dset: &TransformedSet) -> f64 {
    let mut total = 0.0;
    for d in dset.iter() {
        match diagonal_gap(d) {
            Some(gap) => total += gap,
            None => return INFINITE_LOSS,
        }
    }
    total / (2.0 * dset.n() as f64)
}

/// Loss of the matrix `b` (which need not be invertible) on `cset`.
pub fn loss_at(cset: &SymmetricMatrixSet, b: &DMatrix<f64>) -> Result<f64> {
    Ok(loss(&transform_with(cset, b)?))
}

/// `sum_i log det C^i`, needed once per solve by [`incremental_loss`].
pub fn sum_log_det(cset: &SymmetricMatrixSet) -> Result<f64> {
    let mut failed = Vec::new();
    let mut total = 0.0;
    for (i, c) in cset.iter().enumerate() {
        match log_det_spd(c.clone_owned()) {
            Some(v) => total += v,
            None => failed.push(i),
        }
    }
    if failed.is_empty() {
        Ok(total)
    } else {
        Err(AjdError::NotPositiveDefinite { indices: failed })
    }
}

/// Loss from the diagonals alone, using
/// `log det(B C^i B^T) = log det C^i + 2 log|det B|`.
///
/// `diag_log_sum` is `sum_i sum_a log D^i_aa`.
pub fn loss_from_parts(n: usize, diag_log_sum: f64, sum_log_det_c: f64, log_abs_det_b: f64) -> f64 {
    let value = (diag_log_sum - sum_log_det_c - 2.0 * n as f64 * log_abs_det_b) / (2.0 * n as f64);
    if value.is_nan() || !log_abs_det_b.is_finite() {
        INFINITE_LOSS
    } else {
        value
    }
}

/// Incremental counterpart of [`loss`], valid for `dset = B C B^T`.
pub fn incremental_loss(dset: &TransformedSet, sum_log_det_c: f64, log_abs_det_b: f64) -> f64 {
    let mut diag_log_sum = 0.0;
    for i in 0..dset.n() {
        for v in dset.diagonal(i) {
            if !(v > 0.0) {
                return INFINITE_LOSS;
            }
            diag_log_sum += v.ln();
        }
    }
    loss_from_parts(dset.n(), diag_log_sum, sum_log_det_c, log_abs_det_b)
}

/// Relative gradient `G_ab = (1/n) sum_i D^i_ab / D^i_aa - δ_ab`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeGradient {
    g: DMatrix<f64>,
}

impl RelativeGradient {
    pub fn from_matrix(g: DMatrix<f64>) -> Self {
        Self { g }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.g
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.g.norm()
    }
}

pub fn relative_gradient(dset: &TransformedSet) -> Result<RelativeGradient> {
    check_diagonals(dset)?;
    let p = dset.p();
    let mut g = DMatrix::zeros(p, p);
    for d in dset.iter() {
        for a in 0..p {
            let daa = d[(a, a)];
            for b in 0..p {
                if a != b {
                    g[(a, b)] += d[(a, b)] / daa;
                }
            }
        }
    }
    g /= dset.n() as f64;
    // the diagonal is (1/n) sum 1 - 1 = 0; it is left untouched at exactly 0
    Ok(RelativeGradient { g })
}

/// Dense relative Hessian, indexed `(a, b, c, d)`. Reference use only.
#[derive(Debug, Clone, PartialEq)]
pub struct FullHessian {
    p: usize,
    data: Vec<f64>,
}

impl FullHessian {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let p = self.p;
        self.data[((a * p + b) * p + c) * p + d]
    }

    /// `<M | H | M'> = sum_abcd H_abcd M_ab M'_cd`.
    pub fn bilinear(&self, m: &DMatrix<f64>, m2: &DMatrix<f64>) -> f64 {
        let p = self.p;
        let mut acc = 0.0;
        for a in 0..p {
            for b in 0..p {
                for c in 0..p {
                    for d in 0..p {
                        acc += self.get(a, b, c, d) * m[(a, b)] * m2[(c, d)];
                    }
                }
            }
        }
        acc
    }

    /// The tensor as a `p^2 x p^2` matrix with row `(a, b)` and column `(c, d)`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let pp = self.p * self.p;
        DMatrix::from_row_slice(pp, pp, &self.data)
    }
}

pub fn full_hessian(dset: &TransformedSet) -> Result<FullHessian> {
    check_diagonals(dset)?;
    let p = dset.p();
    let n = dset.n() as f64;
    let mut data = vec![0.0; p * p * p * p];
    let idx = |a: usize, b: usize, c: usize, d: usize| ((a * p + b) * p + c) * p + d;
    for dm in dset.iter() {
        for a in 0..p {
            let daa = dm[(a, a)];
            for b in 0..p {
                for d in 0..p {
                    let term = dm[(b, d)] / daa - 2.0 * (dm[(a, b)] * dm[(a, d)]) / (daa * daa);
                    data[idx(a, b, a, d)] += term;
                }
            }
        }
    }
    for a in 0..p {
        for b in 0..p {
            for d in 0..p {
                data[idx(a, b, a, d)] /= n;
            }
        }
    }
    for a in 0..p {
        for b in 0..p {
            data[idx(a, b, b, a)] += 1.0;
        }
    }
    Ok(FullHessian { p, data })
}

/// `Γ_ab = (1/n) sum_i D^i_bb / D^i_aa`, plus the diagonals it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    gamma: DMatrix<f64>,
    diagonals: Vec<f64>,
    n: usize,
}

/// Direction returned by [`approx_hessian_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSolve {
    pub x: DMatrix<f64>,
    /// Pairs `(a, b)` whose block fell back to the identity.
    pub degenerate_blocks: usize,
}

impl GammaMatrix {
    /// Builds Γ from an explicit matrix; used where the diagonals are not at hand.
    pub fn from_matrix(gamma: DMatrix<f64>) -> Result<Self> {
        if !gamma.is_square() {
            return Err(AjdError::DimensionMismatch {
                expected: "square Γ".into(),
                actual: format!("{}x{}", gamma.nrows(), gamma.ncols()),
            });
        }
        Ok(Self {
            gamma,
            diagonals: Vec::new(),
            n: 0,
        })
    }

    pub fn p(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// `n x p` row-major array of `D^i_aa` (empty when built from a matrix).
    pub fn diagonals(&self) -> &[f64] {
        &self.diagonals
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        approx_hessian_apply(self, m)
    }

    pub fn solve(&self, g: &DMatrix<f64>) -> Result<BlockSolve> {
        approx_hessian_solve(self, g)
    }
}

pub fn gamma(dset: &TransformedSet) -> Result<GammaMatrix> {
    check_diagonals(dset)?;
    let p = dset.p();
    let n = dset.n();
    let diagonals: Vec<f64> = (0..n).flat_map(|i| dset.diagonal(i)).collect();
    let mut gamma = DMatrix::zeros(p, p);
    for diag in diagonals.chunks_exact(p) {
        for a in 0..p {
            for b in 0..p {
                gamma[(a, b)] += diag[b] / diag[a];
            }
        }
    }
    gamma /= n as f64;
    Ok(GammaMatrix {
        gamma,
        diagonals,
        n,
    })
}

fn check_square(p: usize, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != p || m.ncols() != p {
        return Err(AjdError::DimensionMismatch {
            expected: format!("{p}x{p}"),
            actual: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

/// Applies the approximate Hessian as independent 2x2 blocks acting on
/// `(M_ab, M_ba)`; diagonal entries map to zero.
pub fn approx_hessian_apply(gamma: &GammaMatrix, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = gamma.p();
    check_square(p, m)?;
    let g = &gamma.gamma;
    let mut out = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            if a != b {
                out[(a, b)] = g[(a, b)] * m[(a, b)] + m[(b, a)];
            }
        }
    }
    Ok(out)
}

/// Pseudoinverse of the approximate Hessian applied to `g`.
///
/// Each off-diagonal pair is solved in closed form,
/// `X_ab = (Γ_ba G_ab - G_ba) / (Γ_ab Γ_ba - 1)`; the diagonal of `X` is 0.
/// Near-singular blocks fall back to `X_ab = G_ab, X_ba = G_ba`.
pub fn approx_hessian_solve(gamma: &GammaMatrix, g: &DMatrix<f64>) -> Result<BlockSolve> {
    let p = gamma.p();
    check_square(p, g)?;
    let h = &gamma.gamma;
    let mut x = DMatrix::zeros(p, p);
    let mut degenerate_blocks = 0;
    for a in 0..p {
        for b in (a + 1)..p {
            let (hab, hba) = (h[(a, b)], h[(b, a)]);
            let (gab, gba) = (g[(a, b)], g[(b, a)]);
            let det = hab * hba - 1.0;
            if det < DEGENERATE_BLOCK_THRESHOLD {
                degenerate_blocks += 1;
                x[(a, b)] = gab;
                x[(b, a)] = gba;
            } else {
                x[(a, b)] = (hba * gab - gba) / det;
                x[(b, a)] = (hab * gba - gab) / det;
            }
        }
    }
    Ok(BlockSolve {
        x,
        degenerate_blocks,
    })
}

/// Dense `p^2 x p^2` operator of the approximate Hessian, entry by entry:
/// `H~_abcd = δ_ac δ_bd Γ_ab + δ_ad δ_bc - 2 δ_abcd`.
pub fn approx_hessian_dense(gamma: &GammaMatrix) -> DMatrix<f64> {
    let p = gamma.p();
    let g = &gamma.gamma;
    let delta = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
    DMatrix::from_fn(p * p, p * p, |row, col| {
        let (a, b) = (row / p, row % p);
        let (c, d) = (col / p, col % p);
        let all_equal = if a == b && b == c && c == d { 1.0 } else { 0.0 };
        delta(a, c) * delta(b, d) * g[(a, b)] + delta(a, d) * delta(b, c) - 2.0 * all_equal
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn single(m: DMatrix<f64>) -> TransformedSet {
        TransformedSet::from_matrices(&[m]).unwrap()
    }

    #[test]
    fn diagonal_set_has_zero_loss_and_gradient() {
        let d = TransformedSet::from_matrices(&[
            DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0, 3.0]),
            DMatrix::from_diagonal(&nalgebra::dvector![0.5, 4.0, 0.1]),
        ])
        .unwrap();
        assert!(loss(&d).abs() < 1e-15);
        assert_eq!(relative_gradient(&d).unwrap().norm(), 0.0);
    }

    #[test]
    fn two_by_two_loss_and_gradient() {
        let d = single(dmatrix![2.0, 1.0; 1.0, 2.0]);
        let expected = 0.5 * (4.0f64.ln() - 3.0f64.ln());
        assert!((loss(&d) - expected).abs() < 1e-15);
        assert!((loss(&d) - 0.143_841_0).abs() < 1e-7);
        let g = relative_gradient(&d).unwrap();
        assert_eq!(g.matrix(), &dmatrix![0.0, 0.5; 0.5, 0.0]);
    }

    #[test]
    fn out_of_domain_inputs() {
        let d = single(dmatrix![-1.0, 0.0; 0.0, 1.0]);
        assert_eq!(loss(&d), INFINITE_LOSS);
        assert!(matches!(
            relative_gradient(&d),
            Err(AjdError::OutsideDomain { matrix: 0, entry: 0, .. })
        ));
        assert!(gamma(&d).is_err());
        assert!(full_hessian(&d).is_err());
        // positive diagonal but indefinite
        assert_eq!(loss(&single(dmatrix![1.0, 2.0; 2.0, 1.0])), INFINITE_LOSS);
    }

    #[test]
    fn gamma_examples() {
        let d = TransformedSet::from_matrices(&[
            dmatrix![1.0, 0.0; 0.0, 2.0],
            dmatrix![2.0, 0.0; 0.0, 1.0],
        ])
        .unwrap();
        let gm = gamma(&d).unwrap();
        let g = gm.matrix();
        assert_eq!(g[(0, 0)], 1.0);
        assert_eq!(g[(1, 1)], 1.0);
        assert_eq!(g[(0, 1)], 1.25);
        assert_eq!(g[(1, 0)], 1.25);
        assert_eq!(g[(0, 1)] * g[(1, 0)], 1.5625);
        assert_eq!(gm.diagonals(), &[1.0, 2.0, 2.0, 1.0]);

        let flat = gamma(&single(dmatrix![3.0, 0.0; 0.0, 3.0])).unwrap();
        assert_eq!(flat.matrix()[(0, 1)] * flat.matrix()[(1, 0)], 1.0);
    }

    fn gamma_125() -> GammaMatrix {
        GammaMatrix::from_matrix(dmatrix![1.0, 1.25; 1.25, 1.0]).unwrap()
    }

    #[test]
    fn apply_block_example() {
        let out = approx_hessian_apply(&gamma_125(), &dmatrix![0.0, 1.0; 0.0, 0.0]).unwrap();
        assert_eq!(out, dmatrix![0.0, 1.25; 1.0, 0.0]);
    }

    #[test]
    fn apply_annihilates_diagonal_units() {
        let gm = GammaMatrix::from_matrix(dmatrix![1.0, 2.0, 0.5; 3.0, 1.0, 1.5; 4.0, 0.7, 1.0])
            .unwrap();
        for i in 0..3 {
            let mut e = DMatrix::zeros(3, 3);
            e[(i, i)] = 1.0;
            assert_eq!(gm.apply(&e).unwrap(), DMatrix::zeros(3, 3));
        }
    }

    #[test]
    fn solve_examples() {
        let gm = gamma_125();
        let zero = gm.solve(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(zero.x, DMatrix::zeros(2, 2));

        let s = gm.solve(&dmatrix![0.0, 0.5; 0.5, 0.0]).unwrap();
        let expected = (1.25 * 0.5 - 0.5) / 0.5625;
        assert!((s.x[(0, 1)] - expected).abs() < 1e-15);
        assert!((s.x[(1, 0)] - expected).abs() < 1e-15);
        assert!((expected - 0.222_222_222_222).abs() < 1e-12);
        assert_eq!(s.degenerate_blocks, 0);
    }

    #[test]
    fn degenerate_block_falls_back_to_identity() {
        let gm = GammaMatrix::from_matrix(dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        let g = dmatrix![0.0, 0.3; -0.1, 0.0];
        let s = gm.solve(&g).unwrap();
        assert_eq!(s.x, g);
        assert_eq!(s.degenerate_blocks, 1);
    }

    #[test]
    fn dimension_checks() {
        let gm = gamma_125();
        assert!(gm.apply(&DMatrix::zeros(3, 3)).is_err());
        assert!(gm.solve(&DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn full_hessian_diagonal_entries_vanish() {
        let d = single(dmatrix![2.0, 0.4, -0.3; 0.4, 1.5, 0.2; -0.3, 0.2, 3.0]);
        let h = full_hessian(&d).unwrap();
        for a in 0..3 {
            assert_eq!(h.get(a, a, a, a), 0.0);
        }
    }
}
