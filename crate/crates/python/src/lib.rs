//! Python bindings: ellipsoid geometry, case configuration and the
//! corridor experiments. Structured results cross the boundary as JSON text.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ellmpc::corridor::{self, CaseParams, Controller};
use ellmpc::ellipsoid::{self, Halfspace, SmoothingParams, SymPsdMatrix};
use ellmpc::linalg::Mat;
use ellmpc::selftest::{run_selftest, SelftestOptions};

fn err(e: ellmpc::Error) -> PyErr {
    match e {
        ellmpc::Error::Config(_) | ellmpc::Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyclass(name = "Ellipsoid", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEllipsoid(ellipsoid::Ellipsoid);

#[pymethods]
impl PyEllipsoid {
    #[new]
    fn new(shape: Vec<Vec<f64>>, center: Vec<f64>) -> PyResult<Self> {
        let n = center.len();
        if shape.len() != n || shape.iter().any(|r| r.len() != n) {
            return Err(PyValueError::new_err("shape must be n x n with n = len(center)"));
        }
        let m = Mat::from_row_major(n, n, shape.concat());
        let q = SymPsdMatrix::new(m).map_err(err)?;
        Ok(PyEllipsoid(ellipsoid::Ellipsoid::new(q, center).map_err(err)?))
    }

    #[staticmethod]
    fn unit_ball(n: usize) -> Self {
        PyEllipsoid(ellipsoid::Ellipsoid::unit_ball(n))
    }

    #[getter]
    fn center(&self) -> Vec<f64> {
        self.0.center().to_vec()
    }

    #[getter]
    fn shape(&self) -> Vec<Vec<f64>> {
        self.0.shape().as_mat().to_rows()
    }

    #[pyo3(signature = (x, tol = ellipsoid::MEMBERSHIP_TOL))]
    fn contains(&self, x: Vec<f64>, tol: f64) -> PyResult<bool> {
        if x.len() != self.0.dim() {
            return Err(PyValueError::new_err("point has the wrong dimension"));
        }
        Ok(ellipsoid::contains(&self.0, &x, tol))
    }

    fn log_volume(&self) -> f64 {
        ellipsoid::log_volume(&self.0)
    }

    /// Enclosure of the part with `normal . x <= offset`.
    #[pyo3(signature = (normal, offset, smooth = false))]
    fn cut(&self, normal: Vec<f64>, offset: f64, smooth: bool) -> PyResult<Self> {
        let hs = Halfspace::new(normal, offset).map_err(err)?;
        ellipsoid::loewner_john_cut(&self.0, &hs, &SmoothingParams::default(), smooth).map(PyEllipsoid).map_err(err)
    }

    #[pyo3(signature = (normal, offset, smooth = false))]
    fn partition(&self, normal: Vec<f64>, offset: f64, smooth: bool) -> PyResult<(Self, Self)> {
        let hs = Halfspace::new(normal, offset).map_err(err)?;
        let (a, b) = ellipsoid::partition_pair(&self.0, &hs, &SmoothingParams::default(), smooth).map_err(err)?;
        Ok((PyEllipsoid(a), PyEllipsoid(b)))
    }

    fn __repr__(&self) -> String {
        format!("Ellipsoid(n={}, center={:?})", self.0.dim(), self.0.center())
    }
}

#[pyclass(name = "CaseParams", skip_from_py_object)]
#[derive(Clone)]
struct PyCaseParams(CaseParams);

#[pymethods]
impl PyCaseParams {
    /// Defaults, overridden by the keys of an optional JSON object.
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        match json {
            Some(text) => CaseParams::from_json(text).map(PyCaseParams).map_err(err),
            None => Ok(PyCaseParams(CaseParams::default())),
        }
    }

    #[getter]
    fn controller(&self) -> &'static str {
        self.0.controller.name()
    }

    #[setter]
    fn set_controller(&mut self, name: &str) -> PyResult<()> {
        self.0.controller = Controller::parse(name).map_err(err)?;
        Ok(())
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon
    }

    #[getter]
    fn sim_steps(&self) -> usize {
        self.0.sim_steps
    }

    #[setter]
    fn set_sim_steps(&mut self, n: usize) {
        self.0.sim_steps = n;
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }
}

/// Open-loop scenario tree at the initial state, as JSON.
#[pyfunction]
fn open_loop(py: Python<'_>, params: &PyCaseParams) -> PyResult<String> {
    let p = params.0.clone();
    let solve = py.detach(|| corridor::open_loop(&p)).map_err(err)?;
    to_json(&solve.solution.to_record().map_err(err)?)
}

/// One closed-loop run, as JSON.
#[pyfunction]
fn closed_loop(py: Python<'_>, params: &PyCaseParams, seed: u64) -> PyResult<String> {
    let p = params.0.clone();
    to_json(&py.detach(|| corridor::closed_loop_run(&p, seed)).map_err(err)?)
}

/// Batch summary over `n_runs` seeds for the named controllers (all when empty).
#[pyfunction]
#[pyo3(signature = (params, n_runs, base_seed = 0, controllers = Vec::new()))]
fn batch(py: Python<'_>, params: &PyCaseParams, n_runs: usize, base_seed: u64, controllers: Vec<String>) -> PyResult<String> {
    let p = params.0.clone();
    let list = if controllers.is_empty() {
        Controller::ALL.to_vec()
    } else {
        controllers.iter().map(|c| Controller::parse(c)).collect::<ellmpc::Result<Vec<_>>>().map_err(err)?
    };
    to_json(&py.detach(|| corridor::batch_experiment(&p, &list, n_runs, base_seed)).map_err(err)?)
}

#[pyfunction]
fn selftest() -> PyResult<String> {
    to_json(&run_selftest(&SelftestOptions::default()))
}

#[pymodule]
fn pyellmpc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEllipsoid>()?;
    m.add_class::<PyCaseParams>()?;
    m.add_function(wrap_pyfunction!(open_loop, m)?)?;
    m.add_function(wrap_pyfunction!(closed_loop, m)?)?;
    m.add_function(wrap_pyfunction!(batch, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add("CONTROLLERS", Controller::ALL.iter().map(|c| c.name()).collect::<Vec<_>>())?;
    Ok(())
}
