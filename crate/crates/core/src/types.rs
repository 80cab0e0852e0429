//! Matrix-set and diagonalizer data model, and the congruence transform
//! `D^i = B C^i B^T` that produces the working set.
//!
//! Sets are stored as `n` contiguous `p x p` blocks. Because every stored
//! matrix is symmetric, the row-major block is also a valid column-major
//! block, so views into the buffer are handed out as nalgebra matrices
//! without copying.

use nalgebra::{Cholesky, DMatrix, DMatrixView};

use crate::error::{AjdError, Result};

/// Relative asymmetry tolerated at construction before the input is rejected.
pub const ASYMMETRY_TOLERANCE: f64 = 1e-8;

/// A set `(C^1, ..., C^n)` of symmetric `p x p` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrixSet {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

/// Shared storage layout of [`SymmetricMatrixSet`] and [`TransformedSet`].
fn block<'a>(data: &'a [f64], p: usize, i: usize) -> DMatrixView<'a, f64> {
    let len = p * p;
    DMatrixView::from_slice(&data[i * len..(i + 1) * len], p, p)
}

/// Symmetrizes one row-major block in place, returning the maximum
/// absolute asymmetry and the maximum absolute entry seen beforehand.
fn symmetrize_block(block: &mut [f64], p: usize) -> (f64, f64) {
    let mut asym = 0.0f64;
    let mut scale = 0.0f64;
    for a in 0..p {
        scale = scale.max(block[a * p + a].abs());
        for b in (a + 1)..p {
            let x = block[a * p + b];
            let y = block[b * p + a];
            asym = asym.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
            let s = 0.5 * (x + y);
            block[a * p + b] = s;
            block[b * p + a] = s;
        }
    }
    (asym, scale)
}

impl SymmetricMatrixSet {
    /// Builds a set from `n` row-major `p x p` matrices laid out contiguously.
    ///
    /// Inputs whose asymmetry is below `1e-8 * max|C|` are symmetrized as
    /// `(C + C^T) / 2`; anything larger is rejected.
    pub fn from_row_major(n: usize, p: usize, mut data: Vec<f64>) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(AjdError::InvalidArgument(format!(
                "matrix set needs n >= 1 and p >= 1, got n = {n}, p = {p}"
            )));
        }
        if data.len() != n * p * p {
            return Err(AjdError::DimensionMismatch {
                expected: format!("{} values (n = {n}, p = {p})", n * p * p),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(AjdError::InvalidArgument(format!(
                "non-finite entry in matrix {}",
                pos / (p * p)
            )));
        }
        for (index, chunk) in data.chunks_exact_mut(p * p).enumerate() {
            let (asymmetry, scale) = symmetrize_block(chunk, p);
            let tolerance = ASYMMETRY_TOLERANCE * scale;
            if asymmetry > tolerance {
                return Err(AjdError::Asymmetric {
                    index,
                    asymmetry,
                    tolerance,
                });
            }
        }
        Ok(Self { n, p, data })
    }

    pub fn from_matrices(matrices: &[DMatrix<f64>]) -> Result<Self> {
        let Some(first) = matrices.first() else {
            return Err(AjdError::InvalidArgument("empty matrix set".into()));
        };
        let p = first.nrows();
        let mut data = Vec::with_capacity(matrices.len() * p * p);
        for (i, m) in matrices.iter().enumerate() {
            if m.nrows() != p || m.ncols() != p {
                return Err(AjdError::DimensionMismatch {
                    expected: format!("{p}x{p}"),
                    actual: format!("{}x{} (matrix {i})", m.nrows(), m.ncols()),
                });
            }
            // row-major copy
            data.extend(m.transpose().iter().copied());
        }
        Self::from_row_major(matrices.len(), p, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Row-major values of all matrices, in order.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn matrix(&self, i: usize) -> DMatrixView<'_, f64> {
        block(&self.data, self.p, i)
    }

    pub fn iter(&self) -> impl Iterator<Item = DMatrixView<'_, f64>> + '_ {
        (0..self.n).map(move |i| self.matrix(i))
    }

    /// Arithmetic mean `(1/n) sum_i C^i`.
    pub fn mean(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.p, self.p);
        for c in self.iter() {
            acc += c;
        }
        acc / self.n as f64
    }
}

/// The current unmixing matrix `B` together with a running `log|det B|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagonalizer {
    b: DMatrix<f64>,
    log_abs_det: f64,
}

/// `log|det M|` from an LU factorization; `-inf` when `M` is singular.
pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    assert!(m.is_square(), "log_abs_det needs a square matrix");
    let lu = m.clone().lu();
    lu.u().diagonal().iter().map(|u| u.abs().ln()).sum()
}

impl Diagonalizer {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if !b.is_square() || b.nrows() == 0 {
            return Err(AjdError::DimensionMismatch {
                expected: "non-empty square matrix".into(),
                actual: format!("{}x{}", b.nrows(), b.ncols()),
            });
        }
        let log_abs_det = log_abs_det(&b);
        if !log_abs_det.is_finite() {
            return Err(AjdError::SingularDiagonalizer);
        }
        Ok(Self { b, log_abs_det })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            b: DMatrix::identity(p, p),
            log_abs_det: 0.0,
        }
    }

    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.b
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_det
    }

    /// Relative update `B <- M B` with `log|det M|` supplied by the caller.
    pub fn left_update(&self, m: &DMatrix<f64>, log_abs_det_m: f64) -> Self {
        Self {
            b: m * &self.b,
            log_abs_det: self.log_abs_det + log_abs_det_m,
        }
    }

    /// Recomputes `log|det B|` from scratch, discarding accumulated drift.
    pub fn refreshed(mut self) -> Self {
        self.log_abs_det = log_abs_det(&self.b);
        self
    }
}

/// The working set `D^i = B C^i B^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedSet {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl TransformedSet {
    /// Wraps explicit matrices as a working set (symmetrized, no tolerance check).
    pub fn from_matrices(matrices: &[DMatrix<f64>]) -> Result<Self> {
        let Some(first) = matrices.first() else {
            return Err(AjdError::InvalidArgument("empty matrix set".into()));
        };
        let p = first.nrows();
        let mut data = Vec::with_capacity(matrices.len() * p * p);
        for m in matrices {
            if m.nrows() != p || m.ncols() != p {
                return Err(AjdError::DimensionMismatch {
                    expected: format!("{p}x{p}"),
                    actual: format!("{}x{}", m.nrows(), m.ncols()),
                });
            }
            data.extend(m.transpose().iter().copied());
        }
        for chunk in data.chunks_exact_mut(p * p) {
            symmetrize_block(chunk, p);
        }
        Ok(Self {
            n: matrices.len(),
            p,
            data,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn matrix(&self, i: usize) -> DMatrixView<'_, f64> {
        block(&self.data, self.p, i)
    }

    pub fn iter(&self) -> impl Iterator<Item = DMatrixView<'_, f64>> + '_ {
        (0..self.n).map(move |i| self.matrix(i))
    }

    /// `D^i_aa` for every matrix.
    pub fn diagonal(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let p = self.p;
        let base = i * p * p;
        (0..p).map(move |a| self.data[base + a * p + a])
    }

    /// Applies a further congruence `M D^i M^T` to every matrix.
    pub fn congruence(&self, m: &DMatrix<f64>) -> Result<Self> {
        congruence(self.n, self.p, &self.data, m).map(|data| Self {
            n: self.n,
            p: self.p,
            data,
        })
    }
}

fn congruence(n: usize, p: usize, src: &[f64], m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows() != p || m.ncols() != p {
        return Err(AjdError::DimensionMismatch {
            expected: format!("{p}x{p} transform"),
            actual: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    let mut out = vec![0.0; n * p * p];
    let mut left = DMatrix::zeros(p, p);
    let mut prod = DMatrix::zeros(p, p);
    let mt = m.transpose();
    for (i, dst) in out.chunks_exact_mut(p * p).enumerate() {
        left.gemm(1.0, m, &block(src, p, i), 0.0);
        prod.gemm(1.0, &left, &mt, 0.0);
        // column-major product; symmetrization makes the layout moot
        dst.copy_from_slice(prod.as_slice());
        symmetrize_block(dst, p);
    }
    Ok(out)
}

/// Computes `D^i = B C^i B^T` for every matrix of the set.
pub fn transform_set(cset: &SymmetricMatrixSet, b: &Diagonalizer) -> Result<TransformedSet> {
    transform_with(cset, b.matrix())
}

/// [`transform_set`] for a bare matrix, which need not be invertible.
pub fn transform_with(cset: &SymmetricMatrixSet, b: &DMatrix<f64>) -> Result<TransformedSet> {
    congruence(cset.n, cset.p, &cset.data, b).map(|data| TransformedSet {
        n: cset.n,
        p: cset.p,
        data,
    })
}

/// Outcome of [`validate_spd`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpdReport {
    /// One flag per matrix: whether a Cholesky factorization succeeded.
    pub positive_definite: Vec<bool>,
}

impl SpdReport {
    pub fn all_positive_definite(&self) -> bool {
        self.positive_definite.iter().all(|&ok| ok)
    }

    pub fn failures(&self) -> Vec<usize> {
        self.positive_definite
            .iter()
            .enumerate()
            .filter_map(|(i, &ok)| (!ok).then_some(i))
            .collect()
    }

    pub fn into_result(self) -> Result<()> {
        if self.all_positive_definite() {
            Ok(())
        } else {
            Err(AjdError::NotPositiveDefinite {
                indices: self.failures(),
            })
        }
    }
}

pub fn validate_spd(cset: &SymmetricMatrixSet) -> SpdReport {
    SpdReport {
        positive_definite: cset
            .iter()
            .map(|c| Cholesky::new(c.clone_owned()).is_some())
            .collect(),
    }
}
