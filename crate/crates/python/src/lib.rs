//! Python bindings. Matrix sets cross the boundary as `(n, p, p)` float64
//! arrays, single matrices as `(p, p)` arrays.

use jointdiag::criterion;
use jointdiag::data::{self, SynthConfig};
use jointdiag::io::MatSetFile;
use jointdiag::solver::{self, Method, SolverConfig};
use jointdiag::{AjdError, Diagonalizer, SymmetricMatrixSet};
use nalgebra::DMatrix;
use numpy::ndarray::{Array2, Array3};
use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py_err(err: AjdError) -> PyErr {
    match err {
        AjdError::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn set_from_array(c: &PyReadonlyArray3<'_, f64>) -> PyResult<SymmetricMatrixSet> {
    let view = c.as_array();
    let (n, p, q) = view.dim();
    if p != q {
        return Err(PyValueError::new_err(format!("expected (n, p, p) array, got ({n}, {p}, {q})")));
    }
    SymmetricMatrixSet::from_row_major(n, p, view.iter().copied().collect()).map_err(to_py_err)
}

fn matrix_from_array(m: &PyReadonlyArray2<'_, f64>) -> DMatrix<f64> {
    let view = m.as_array();
    let (r, c) = view.dim();
    DMatrix::from_fn(r, c, |i, j| view[[i, j]])
}

fn matrix_to_array<'py>(py: Python<'py>, m: &DMatrix<f64>) -> Bound<'py, PyArray2<f64>> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)]).into_pyarray(py)
}

fn set_to_array<'py>(py: Python<'py>, set: &SymmetricMatrixSet) -> Bound<'py, PyArray3<f64>> {
    Array3::from_shape_vec((set.n(), set.p(), set.p()), set.as_slice().to_vec())
        .expect("set layout is n * p * p")
        .into_pyarray(py)
}

/// Draw a synthetic set; returns `(C, A)`.
#[pyfunction]
#[pyo3(signature = (n, p, sigma = 0.0, seed = 0))]
fn gen_synthetic<'py>(
    py: Python<'py>,
    n: usize,
    p: usize,
    sigma: f64,
    seed: u64,
) -> PyResult<(Bound<'py, PyArray3<f64>>, Bound<'py, PyArray2<f64>>)> {
    let (set, truth) = data::gen_synthetic(&SynthConfig::new(n, p, sigma, seed)).map_err(to_py_err)?;
    Ok((set_to_array(py, &set), matrix_to_array(py, &truth.a)))
}

#[pyfunction]
fn whitener<'py>(py: Python<'py>, c: PyReadonlyArray3<'py, f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let set = set_from_array(&c)?;
    let b = data::whitener(&set).map_err(to_py_err)?;
    Ok(matrix_to_array(py, b.matrix()))
}

/// Loss of `B` on `C`; `inf` outside the domain.
#[pyfunction]
fn loss(c: PyReadonlyArray3<'_, f64>, b: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    let set = set_from_array(&c)?;
    criterion::loss_at(&set, &matrix_from_array(&b)).map_err(to_py_err)
}

#[pyfunction]
fn relative_gradient<'py>(
    py: Python<'py>,
    c: PyReadonlyArray3<'py, f64>,
    b: PyReadonlyArray2<'py, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let set = set_from_array(&c)?;
    let dset = jointdiag::types::transform_with(&set, &matrix_from_array(&b)).map_err(to_py_err)?;
    let g = criterion::relative_gradient(&dset).map_err(to_py_err)?;
    Ok(matrix_to_array(py, g.matrix()))
}

#[pyfunction]
fn gamma<'py>(
    py: Python<'py>,
    c: PyReadonlyArray3<'py, f64>,
    b: PyReadonlyArray2<'py, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let set = set_from_array(&c)?;
    let dset = jointdiag::types::transform_with(&set, &matrix_from_array(&b)).map_err(to_py_err)?;
    let gm = criterion::gamma(&dset).map_err(to_py_err)?;
    Ok(matrix_to_array(py, gm.matrix()))
}

/// Quasi-Newton direction `H~^+ G` for a given Γ and gradient.
#[pyfunction]
fn approx_hessian_solve<'py>(
    py: Python<'py>,
    gamma: PyReadonlyArray2<'py, f64>,
    g: PyReadonlyArray2<'py, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let gm = criterion::GammaMatrix::from_matrix(matrix_from_array(&gamma)).map_err(to_py_err)?;
    let solved = gm.solve(&matrix_from_array(&g)).map_err(to_py_err)?;
    Ok(matrix_to_array(py, &solved.x))
}

#[pyfunction]
fn validate_spd(c: PyReadonlyArray3<'_, f64>) -> PyResult<Vec<bool>> {
    Ok(jointdiag::validate_spd(&set_from_array(&c)?).positive_definite)
}

#[pyfunction]
fn covariances_from_segments<'py>(
    py: Python<'py>,
    segments: Vec<PyReadonlyArray2<'py, f64>>,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let mats: Vec<DMatrix<f64>> = segments.iter().map(matrix_from_array).collect();
    let set = data::covariances_from_segments(&mats).map_err(to_py_err)?;
    Ok(set_to_array(py, &set))
}

#[pyfunction]
fn load_mset<'py>(py: Python<'py>, path: std::path::PathBuf) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let file = MatSetFile::load(path).map_err(to_py_err)?;
    let (n, p) = (file.n as usize, file.p as usize);
    Array3::from_shape_vec((n, p, p), file.data)
        .map(|a| a.into_pyarray(py))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn save_mset(path: std::path::PathBuf, c: PyReadonlyArray3<'_, f64>) -> PyResult<()> {
    let set = set_from_array(&c)?;
    jointdiag::io::save_set(&set, path).map_err(to_py_err)
}

/// Outcome of `solve`.
#[pyclass(module = "pyjointdiag", name = "SolveResult")]
struct PySolveResult {
    inner: solver::SolveResult,
}

#[pymethods]
impl PySolveResult {
    #[getter]
    fn b<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        matrix_to_array(py, self.inner.b.matrix())
    }

    #[getter]
    fn status(&self) -> &'static str {
        self.inner.trace.status.name()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.trace.iterations()
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.inner.final_loss
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.inner.trace.records.iter().map(|r| r.loss).collect()
    }

    #[getter]
    fn grad_norms(&self) -> Vec<f64> {
        self.inner.trace.grad_norms()
    }

    #[getter]
    fn step_sizes(&self) -> Vec<f64> {
        self.inner.trace.records.iter().map(|r| r.step_size).collect()
    }

    #[getter]
    fn wall_times(&self) -> Vec<f64> {
        self.inner.trace.records.iter().map(|r| r.wall_time).collect()
    }

    /// Fitted local convergence order, or None when inconclusive.
    fn convergence_order(&self) -> Option<f64> {
        solver::quadratic_rate_check(&self.inner.trace).order()
    }

    fn __repr__(&self) -> String {
        format!(
            "SolveResult(status={:?}, iterations={}, final_loss={:e})",
            self.status(),
            self.iterations(),
            self.final_loss()
        )
    }
}

/// Jointly diagonalize `C`. `b0` defaults to the whitener.
#[pyfunction]
#[pyo3(signature = (c, b0 = None, method = "qn", max_iter = 1000, tol = 1e-10, max_halvings = 30))]
fn solve(
    py: Python<'_>,
    c: PyReadonlyArray3<'_, f64>,
    b0: Option<PyReadonlyArray2<'_, f64>>,
    method: &str,
    max_iter: usize,
    tol: f64,
    max_halvings: usize,
) -> PyResult<PySolveResult> {
    let set = set_from_array(&c)?;
    let method: Method = method.parse().map_err(to_py_err)?;
    let b0 = match b0 {
        Some(b) => Diagonalizer::new(matrix_from_array(&b)).map_err(to_py_err)?,
        None => data::whitener(&set).map_err(to_py_err)?,
    };
    let config = SolverConfig {
        max_iter,
        grad_tol: tol,
        max_halvings,
        method,
        record_trace: true,
    };
    let inner = py
        .detach(|| solver::solve(&set, &b0, &config))
        .map_err(to_py_err)?;
    Ok(PySolveResult { inner })
}

#[pymodule]
fn pyjointdiag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySolveResult>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(whitener, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(relative_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(gamma, m)?)?;
    m.add_function(wrap_pyfunction!(approx_hessian_solve, m)?)?;
    m.add_function(wrap_pyfunction!(validate_spd, m)?)?;
    m.add_function(wrap_pyfunction!(covariances_from_segments, m)?)?;
    m.add_function(wrap_pyfunction!(load_mset, m)?)?;
    m.add_function(wrap_pyfunction!(save_mset, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    Ok(())
}
