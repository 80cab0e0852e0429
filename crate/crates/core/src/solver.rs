//! Relative quasi-Newton solver and the relative gradient descent baseline.
//!
//! Both methods iterate `B <- (I - alpha X) B`, where `X` is either the
//! block-inverse direction `H~^+ G` or the gradient `G` itself, and `alpha`
//! is the first of `1, 1/2, 1/4, ...` that strictly decreases the loss.
//! The working set `D^i = B C^i B^T` is carried along by congruence with the
//! accepted `I - alpha X` and rebuilt from scratch every
//! [`REFRESH_INTERVAL`] iterations.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::criterion::{self, gamma, relative_gradient, INFINITE_LOSS};
use crate::error::{AjdError, Result};
use crate::types::{log_abs_det, transform_set, validate_spd, Diagonalizer, SymmetricMatrixSet, TransformedSet};

/// Iterations between from-scratch rebuilds of the working set.
pub const REFRESH_INTERVAL: usize = 50;

/// Norm below which `log|det(I - Y)|` is summed as a series.
const SERIES_RADIUS: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    QuasiNewton,
    GradientDescent,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::QuasiNewton => "quasi_newton",
            Method::GradientDescent => "gradient_descent",
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Method::QuasiNewton => "qn",
            Method::GradientDescent => "gd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = AjdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qn" | "quasi_newton" => Ok(Method::QuasiNewton),
            "gd" | "gradient_descent" => Ok(Method::GradientDescent),
            other => Err(AjdError::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Maximum number of accepted steps.
    pub max_iter: usize,
    /// Stop once `||G||_F < grad_tol`.
    pub grad_tol: f64,
    /// Number of step sizes tried per line search: `1, 1/2, ..., 2^{1-max_halvings}`.
    pub max_halvings: usize,
    pub method: Method,
    /// When false only the final record is kept.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            grad_tol: 1e-10,
            max_halvings: 30,
            method: Method::QuasiNewton,
            record_trace: true,
        }
    }
}

impl SolverConfig {
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_grad_tol(mut self, grad_tol: f64) -> Self {
        self.grad_tol = grad_tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(AjdError::InvalidArgument("max_iter must be >= 1".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(AjdError::InvalidArgument("grad_tol must be > 0".into()));
        }
        if self.max_halvings < 1 {
            return Err(AjdError::InvalidArgument("max_halvings must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterReached,
    LineSearchFailed,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxIterReached => "max_iter_reached",
            Status::LineSearchFailed => "line_search_failed",
        }
    }
}

/// State after iteration `iter`. Row 0 is the starting point and carries
/// `step_size = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step_size: f64,
    pub halvings: usize,
    /// Seconds since the first iteration started; setup time excluded.
    pub wall_time: f64,
    /// `L_{t-1} - L_t` as computed by the line search (0 on row 0).
    pub loss_decrease: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub records: Vec<IterationRecord>,
    pub status: Status,
    /// Seconds spent on validation and building the initial working set.
    pub init_time: f64,
}

impl SolverTrace {
    /// Number of accepted steps.
    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iter)
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// First iteration whose gradient norm is below `tol`.
    pub fn iterations_to(&self, tol: f64) -> Option<usize> {
        self.records.iter().find(|r| r.grad_norm < tol).map(|r| r.iter)
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.grad_norm).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Diagnostics {
    /// Approximate-Hessian blocks solved with the identity fallback.
    pub degenerate_blocks: usize,
    /// Positive-definite factorizations of individual matrices.
    pub factorizations: usize,
    /// Accepted steps whose decrease was below the resolution of the
    /// directly evaluated loss.
    pub unresolved_decreases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub b: Diagonalizer,
    pub trace: SolverTrace,
    pub diagnostics: Diagnostics,
    /// Direct evaluation of the loss at the returned `b`.
    pub final_loss: f64,
}

/// An accepted line-search step.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchStep {
    pub alpha: f64,
    pub halvings: usize,
    /// New loss: `direct_loss` if it is below the current loss, otherwise
    /// the current loss plus `loss_change`.
    pub loss: f64,
    /// `L((I - alpha X) B) - L(B)`, strictly negative.
    pub loss_change: f64,
    /// Loss of the new working set evaluated by factorization.
    pub direct_loss: f64,
    /// `I - alpha X`.
    pub transform: DMatrix<f64>,
    pub log_abs_det_transform: f64,
    /// The working set after the step.
    pub dset: TransformedSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineSearchFailure {
    /// Step sizes evaluated.
    pub tried: usize,
}

/// `log|det(I - Y)|`; `-inf` when singular.
///
/// Small `Y` use `-sum_k tr(Y^k)/k`, which keeps relative accuracy when the
/// result is far below machine epsilon.
pub fn log_abs_det_shifted(y: &DMatrix<f64>) -> f64 {
    let radius = y.norm();
    if radius < SERIES_RADIUS {
        let mut power = y.clone();
        let mut total = -power.trace();
        let mut bound = radius;
        for k in 2..200 {
            power = &power * y;
            let term = power.trace() / k as f64;
            total -= term;
            bound *= radius;
            if bound / (k as f64) < f64::EPSILON * 1e-3 * total.abs().max(f64::MIN_POSITIVE) {
                break;
            }
            if bound == 0.0 {
                break;
            }
        }
        total
    } else {
        let p = y.nrows();
        log_abs_det(&(DMatrix::identity(p, p) - y))
    }
}

/// Change of the loss under `D^i <- (I - alpha X) D^i (I - alpha X)^T`.
struct StepScreen {
    n: usize,
    /// `D^i_aa`, `(X D^i)_aa`, `(X D^i X^T)_aa` per matrix and index.
    diag: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl StepScreen {
    fn new(dset: &TransformedSet, x: &DMatrix<f64>) -> Self {
        let (n, p) = (dset.n(), dset.p());
        let mut diag = Vec::with_capacity(n * p);
        let mut first = Vec::with_capacity(n * p);
        let mut second = Vec::with_capacity(n * p);
        let mut xd = DMatrix::zeros(p, p);
        for (i, d) in dset.iter().enumerate() {
            xd.gemm(1.0, x, &d, 0.0);
            for (a, daa) in dset.diagonal(i).enumerate() {
                diag.push(daa);
                first.push(xd[(a, a)]);
                let mut s = 0.0;
                for b in 0..p {
                    s += xd[(a, b)] * x[(a, b)];
                }
                second.push(s);
            }
        }
        Self {
            n,
            diag,
            first,
            second,
        }
    }

    /// `L(alpha) - L(0)`, or `+inf` outside the domain.
    fn loss_change(&self, alpha: f64, x: &DMatrix<f64>) -> f64 {
        let log_det_m = log_abs_det_shifted(&(x * alpha));
        if !log_det_m.is_finite() {
            return INFINITE_LOSS;
        }
        let mut log_ratio = 0.0;
        for ((&d, &u), &v) in self.diag.iter().zip(&self.first).zip(&self.second) {
            let rel = (alpha * alpha * v - 2.0 * alpha * u) / d;
            if !(rel > -1.0) {
                return INFINITE_LOSS;
            }
            log_ratio += rel.ln_1p();
        }
        log_ratio / (2.0 * self.n as f64) - log_det_m
    }
}

/// Backtracking from `alpha = 1`, halving until the loss strictly decreases.
///
/// The decrease test uses the loss change computed from the diagonals of the
/// candidate set (`O(n p^2)` per candidate once `X D^i` is known), which is
/// accurate relative to the change itself even when it is far below the
/// resolution of `current_loss`. The accepted candidate's set is then built
/// and its loss evaluated directly.
pub fn backtracking_search(
    dset: &TransformedSet,
    direction: &DMatrix<f64>,
    current_loss: f64,
    max_halvings: usize,
) -> std::result::Result<LineSearchStep, LineSearchFailure> {
    let p = dset.p();
    if !current_loss.is_finite() || direction.nrows() != p || direction.ncols() != p {
        return Err(LineSearchFailure { tried: 0 });
    }
    let screen = StepScreen::new(dset, direction);
    let mut alpha = 1.0;
    for halvings in 0..max_halvings {
        let change = screen.loss_change(alpha, direction);
        if change < 0.0 {
            let transform = DMatrix::identity(p, p) - direction * alpha;
            let log_abs_det_transform = log_abs_det_shifted(&(direction * alpha));
            if let Ok(next) = dset.congruence(&transform) {
                let direct_loss = criterion::loss(&next);
                if direct_loss.is_finite() {
                    let loss = if direct_loss < current_loss {
                        direct_loss
                    } else {
                        current_loss + change
                    };
                    return Ok(LineSearchStep {
                        alpha,
                        halvings,
                        loss,
                        loss_change: change,
                        direct_loss,
                        transform,
                        log_abs_det_transform,
                        dset: next,
                    });
                }
            }
        }
        alpha *= 0.5;
    }
    Err(LineSearchFailure {
        tried: max_halvings,
    })
}

/// Loss carried as an unevaluated sum `hi + lo`, so that decreases below
/// the resolution of `hi` still accumulate.
#[derive(Debug, Clone, Copy, PartialEq)]
struct RunningLoss {
    hi: f64,
    lo: f64,
}

impl RunningLoss {
    fn new(value: f64) -> Self {
        Self { hi: value, lo: 0.0 }
    }

    fn add(self, x: f64) -> Self {
        let s = self.hi + x;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (x - bb) + self.lo;
        let hi = s + err;
        Self {
            hi,
            lo: err - (hi - s),
        }
    }

    /// Takes the directly evaluated loss when it shows the decrease, and
    /// otherwise accumulates the accurately computed change.
    fn advance(self, direct: f64, change: f64) -> Self {
        if direct < self.hi {
            Self::new(direct)
        } else {
            self.add(change)
        }
    }
}

fn direction(method: Method, dset: &TransformedSet, g: &DMatrix<f64>, diagnostics: &mut Diagnostics) -> Result<DMatrix<f64>> {
    match method {
        Method::QuasiNewton => {
            let solved = gamma(dset)?.solve(g)?;
            diagnostics.degenerate_blocks += solved.degenerate_blocks;
            Ok(solved.x)
        }
        Method::GradientDescent => {
            let mut x = g.clone();
            x.fill_diagonal(0.0);
            Ok(x)
        }
    }
}

/// Minimizes the joint-diagonality loss starting from `b0`.
pub fn solve(cset: &SymmetricMatrixSet, b0: &Diagonalizer, config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    if b0.p() != cset.p() {
        return Err(AjdError::DimensionMismatch {
            expected: format!("{p}x{p} initial matrix", p = cset.p()),
            actual: format!("{p}x{p}", p = b0.p()),
        });
    }
    let setup = Instant::now();
    validate_spd(cset).into_result()?;
    let mut diagnostics = Diagnostics {
        factorizations: 2 * cset.n(),
        ..Diagnostics::default()
    };
    let mut dset = transform_set(cset, b0)?;
    let initial_loss = criterion::loss(&dset);
    if !initial_loss.is_finite() {
        return Err(AjdError::InvalidArgument(
            "initial working set is outside the domain of the loss".into(),
        ));
    }
    let mut loss = RunningLoss::new(initial_loss);
    let mut b = b0.clone();
    let init_time = setup.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut records = Vec::new();
    let mut iter = 0;
    let mut step_size = 0.0;
    let mut halvings = 0;
    let mut loss_decrease = 0.0;
    let mut since_refresh = 0;
    let status = loop {
        let g = relative_gradient(&dset)?;
        let grad_norm = g.norm();
        let record = IterationRecord {
            iter,
            loss: loss.hi,
            grad_norm,
            step_size,
            halvings,
            wall_time: start.elapsed().as_secs_f64(),
            loss_decrease,
        };
        if !config.record_trace {
            records.clear();
        }
        records.push(record);

        if grad_norm < config.grad_tol {
            break Status::Converged;
        }
        if iter >= config.max_iter {
            break Status::MaxIterReached;
        }
        let x = direction(config.method, &dset, g.matrix(), &mut diagnostics)?;
        match backtracking_search(&dset, &x, loss.hi, config.max_halvings) {
            Ok(step) => {
                diagnostics.factorizations += cset.n();
                if !(step.direct_loss < loss.hi) {
                    diagnostics.unresolved_decreases += 1;
                }
                b = b.left_update(&step.transform, step.log_abs_det_transform);
                loss = loss.advance(step.direct_loss, step.loss_change);
                dset = step.dset;
                step_size = step.alpha;
                halvings = step.halvings;
                loss_decrease = -step.loss_change;
            }
            Err(_) => break Status::LineSearchFailed,
        }
        iter += 1;
        since_refresh += 1;
        if since_refresh == REFRESH_INTERVAL {
            since_refresh = 0;
            b = b.refreshed();
            dset = transform_set(cset, &b)?;
        }
    };

    let final_loss = criterion::loss(&transform_set(cset, &b)?);
    diagnostics.factorizations += cset.n();
    Ok(SolveResult {
        b,
        trace: SolverTrace {
            records,
            status,
            init_time,
        },
        diagnostics,
        final_loss,
    })
}

/// Outcome of [`quadratic_rate_check`].
#[derive(Debug, Clone, PartialEq)]
pub enum RateReport {
    /// Fewer than two usable `(||G_t||, ||G_{t+1}||)` pairs, or no spread in
    /// `||G_t||` to fit against.
    Inconclusive { pairs: usize },
    Fitted {
        pairs: usize,
        /// Least-squares slope of `log ||G_{t+1}||` against `log ||G_t||`.
        order: f64,
        /// Smallest `c` with `||G_{t+1}|| <= c ||G_t||^2` on every pair.
        constant: f64,
    },
}

impl RateReport {
    pub fn order(&self) -> Option<f64> {
        match self {
            RateReport::Fitted { order, .. } => Some(*order),
            RateReport::Inconclusive { .. } => None,
        }
    }

    /// Local order of at least 1.5.
    pub fn is_quadratic(&self) -> bool {
        self.order().is_some_and(|o| o >= 1.5)
    }
}

/// Gradient norm below which iterations enter the rate fit.
pub const RATE_WINDOW: f64 = 1e-3;

/// Fits the local convergence order over the iterations with
/// `||G_t|| < 1e-3`.
pub fn quadratic_rate_check(trace: &SolverTrace) -> RateReport {
    let norms = trace.grad_norms();
    let pairs: Vec<(f64, f64)> = norms
        .windows(2)
        .filter(|w| w[0] < RATE_WINDOW && w[0] > 0.0 && w[1] > 0.0)
        .map(|w| (w[0].ln(), w[1].ln()))
        .collect();
    let count = pairs.len();
    if count < 2 {
        return RateReport::Inconclusive { pairs: count };
    }
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / count as f64;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / count as f64;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if !(sxx > 1e-12) {
        return RateReport::Inconclusive { pairs: count };
    }
    let constant = pairs
        .iter()
        .map(|&(x, y)| (y - 2.0 * x).exp())
        .fold(0.0, f64::max);
    RateReport::Fitted {
        pairs: count,
        order: sxy / sxx,
        constant,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn record(iter: usize, grad_norm: f64) -> IterationRecord {
        IterationRecord {
            iter,
            loss: 1.0 / (iter as f64 + 1.0),
            grad_norm,
            step_size: 1.0,
            halvings: 0,
            wall_time: 0.0,
            loss_decrease: 0.0,
        }
    }

    fn trace(norms: &[f64]) -> SolverTrace {
        SolverTrace {
            records: norms.iter().enumerate().map(|(i, &g)| record(i, g)).collect(),
            status: Status::Converged,
            init_time: 0.0,
        }
    }

    #[test]
    fn zero_direction_fails() {
        let d = TransformedSet::from_matrices(&[dmatrix![2.0, 1.0; 1.0, 2.0]]).unwrap();
        let current = criterion::loss(&d);
        let result = backtracking_search(&d, &DMatrix::zeros(2, 2), current, 30);
        assert!(result.is_err());
    }

    #[test]
    fn overshooting_step_is_halved() {
        // alpha = 1 makes I - X singular; alpha = 1/2 diagonalizes the matrix exactly.
        let d = TransformedSet::from_matrices(&[dmatrix![1.0, 0.8; 0.8, 1.0]]).unwrap();
        let x = dmatrix![0.0, 1.0; 1.0, 0.0];
        let current = criterion::loss(&d);
        let screen = StepScreen::new(&d, &x);
        assert_eq!(screen.loss_change(1.0, &x), INFINITE_LOSS);
        let step = backtracking_search(&d, &x, current, 30).unwrap();
        assert_eq!(step.alpha, 0.5);
        assert_eq!(step.halvings, 1);
        assert!(step.loss.abs() < 1e-15);
        assert!((step.loss_change + current).abs() < 1e-15);
    }

    #[test]
    fn running_loss_keeps_sub_ulp_decreases() {
        let mut loss = RunningLoss::new(0.75);
        for _ in 0..1000 {
            loss = loss.add(-1e-18);
        }
        assert!((loss.hi - (0.75 - 1e-15)).abs() <= f64::EPSILON);
        assert!(loss.hi < 0.75);
        // a direct value that resolves the decrease replaces the sum
        assert_eq!(RunningLoss::new(0.75).advance(0.5, -0.25), RunningLoss::new(0.5));
    }

    #[test]
    fn screen_matches_direct_difference() {
        let d = TransformedSet::from_matrices(&[
            dmatrix![2.0, 0.3, -0.2; 0.3, 1.0, 0.1; -0.2, 0.1, 1.5],
            dmatrix![1.0, -0.4, 0.0; -0.4, 3.0, 0.5; 0.0, 0.5, 0.7],
        ])
        .unwrap();
        let x = dmatrix![0.0, 0.2, -0.1; 0.05, 0.0, 0.3; -0.2, 0.1, 0.0];
        let screen = StepScreen::new(&d, &x);
        let base = criterion::loss(&d);
        for alpha in [1.0, 0.5, 0.125] {
            let m = DMatrix::identity(3, 3) - &x * alpha;
            let direct = criterion::loss(&d.congruence(&m).unwrap()) - base;
            let screened = screen.loss_change(alpha, &x);
            assert!((direct - screened).abs() < 1e-13, "{alpha}: {direct} vs {screened}");
        }
    }

    #[test]
    fn shifted_log_det_series_and_lu_agree() {
        let y = dmatrix![0.0, 0.05, -0.02; 0.03, 0.0, 0.04; -0.01, 0.02, 0.0];
        let lu = log_abs_det(&(DMatrix::identity(3, 3) - &y));
        assert!((log_abs_det_shifted(&y) - lu).abs() < 1e-15);
        let big = &y * 20.0;
        assert_eq!(log_abs_det_shifted(&big), log_abs_det(&(DMatrix::identity(3, 3) - &big)));
        // second-order value far below epsilon
        let tiny = &y * 1e-9;
        let sq = &tiny * &tiny;
        let expected = -0.5 * sq.trace() - (&sq * &tiny).trace() / 3.0;
        assert!((log_abs_det_shifted(&tiny) - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn rate_check_cases() {
        let quad = trace(&[1e-1, 1e-2, 1e-4, 1e-8, 1e-16]);
        let report = quadratic_rate_check(&quad);
        assert!(report.is_quadratic(), "{report:?}");
        assert!((report.order().unwrap() - 2.0).abs() < 1e-9);

        let linear = trace(&[1e-2, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5, 3.125e-5]);
        assert!((quadratic_rate_check(&linear).order().unwrap() - 1.0).abs() < 1e-9);

        let flat = trace(&[1e-4; 6]);
        assert!(matches!(quadratic_rate_check(&flat), RateReport::Inconclusive { .. }));
        let short = trace(&[1.0, 1e-4]);
        assert!(matches!(quadratic_rate_check(&short), RateReport::Inconclusive { pairs: 0 }));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig::default().with_max_iter(0).validate().is_err());
        assert!(SolverConfig::default().with_grad_tol(0.0).validate().is_err());
        let cfg = SolverConfig {
            max_halvings: 0,
            ..SolverConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!("qn".parse::<Method>().unwrap(), Method::QuasiNewton);
        assert_eq!("gd".parse::<Method>().unwrap(), Method::GradientDescent);
        assert!("newton".parse::<Method>().is_err());
    }

    #[test]
    fn diagonal_set_converges_immediately() {
        let cset = SymmetricMatrixSet::from_matrices(&[
            DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0]),
            DMatrix::from_diagonal(&nalgebra::dvector![3.0, 0.5]),
        ])
        .unwrap();
        let res = solve(&cset, &Diagonalizer::identity(2), &SolverConfig::default()).unwrap();
        assert_eq!(res.trace.status, Status::Converged);
        assert_eq!(res.trace.iterations(), 0);
        assert_eq!(res.trace.records[0].grad_norm, 0.0);
        assert!(res.final_loss.abs() < 1e-15);
    }

    #[test]
    fn non_spd_input_is_rejected() {
        let cset = SymmetricMatrixSet::from_matrices(&[dmatrix![1.0, 2.0; 2.0, 1.0]]).unwrap();
        let err = solve(&cset, &Diagonalizer::identity(2), &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, AjdError::NotPositiveDefinite { .. }));
    }
}
