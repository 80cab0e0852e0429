//! Approximate joint diagonalization of sets of symmetric positive matrices.
//!
//! Given `C^1, ..., C^n`, find an invertible `B` making every `B C^i B^T` as
//! diagonal as possible under the log-det criterion
//!
//! ```text
//! L(B) = 1/(2n) sum_i [ log det diag(B C^i B^T) - log det(B C^i B^T) ]
//! ```
//!
//! The main solver is a relative quasi-Newton method: updates are
//! multiplicative, `B <- (I - alpha X) B`, and the search direction `X`
//! comes from a block-diagonal Hessian approximation inverted in closed form
//! at `O(p^2)` cost. A relative gradient descent baseline shares the same
//! backtracking line search.
//!
//! ```no_run
//! use jointdiag::{data, solver};
//!
//! let (cset, _truth) = data::gen_synthetic(&data::SynthConfig::new(100, 40, 0.0, 42)).unwrap();
//! let b0 = data::whitener(&cset).unwrap();
//! let result = solver::solve(&cset, &b0, &solver::SolverConfig::default()).unwrap();
//! println!("{:?} after {} iterations", result.trace.status, result.trace.iterations());
//! ```

pub mod cli;
pub mod criterion;
pub mod data;
pub mod error;
pub mod io;
pub mod solver;
pub mod types;

pub use criterion::{
    approx_hessian_apply, approx_hessian_dense, approx_hessian_solve, full_hessian, gamma, loss,
    loss_at, relative_gradient, FullHessian, GammaMatrix, RelativeGradient, INFINITE_LOSS,
};
pub use error::{AjdError, Result};
pub use solver::{solve, Method, SolveResult, SolverConfig, SolverTrace, Status};
pub use types::{
    transform_set, validate_spd, Diagonalizer, SpdReport, SymmetricMatrixSet, TransformedSet,
};

pub use nalgebra;
