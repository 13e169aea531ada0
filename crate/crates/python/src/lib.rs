//! Python module `coopeig`: problems from JSON, eigenpairs, λ* on nested
//! balls, stability verdicts, path simulation and the batch runner.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use coopeig::cli::config::{ProblemCfg, RegionCfg};
use coopeig::cli::{run, RunArgs};
use coopeig::discretize::{assemble_shared, build_grid, DiscreteOperator};
use coopeig::eigen::{principal_eigenpair, EigenPair, DEFAULT_MAX_ITER, DEFAULT_TOL};
use coopeig::model::{validate, ProblemSpec};
use coopeig::sde::{mean_se, simulate as sde_simulate, Dynamics, Functional, SimConfig};
use coopeig::spectrum::{lambda_star_with, DEFAULT_INNER_RADIUS};
use coopeig::stability::{
    recurrence_test, regularity_test, GeneratorSource, RecurrenceOptions, RegularityOptions, Verdict,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn num_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A problem built from the `problem` block of a run config (JSON text).
#[pyclass(name = "Problem", frozen)]
struct PyProblem {
    spec: ProblemSpec,
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(json: &str) -> PyResult<Self> {
        let cfg: ProblemCfg = serde_json::from_str(json).map_err(value_err)?;
        Ok(PyProblem { spec: cfg.to_spec().map_err(value_err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.spec.dim
    }

    #[getter]
    fn regimes(&self) -> usize {
        self.spec.regimes
    }

    /// Number of sampled violations of cooperativity or ellipticity.
    #[pyo3(signature = (density = 41))]
    fn violations(&self, density: usize) -> PyResult<usize> {
        Ok(validate(&self.spec, density).map_err(value_err)?.violations.len())
    }

    /// Discretized operator (with potential) on a ball, optionally
    /// restricted to some regimes (1-based).
    #[pyo3(signature = (radius, h, center = None, regimes = None))]
    fn operator(&self, radius: f64, h: f64, center: Option<Vec<f64>>, regimes: Option<Vec<usize>>) -> PyResult<PyOperator> {
        let region = RegionCfg { ball: Some(radius), center, bx: None, regimes }
            .to_region(self.spec.dim, self.spec.regimes)
            .map_err(value_err)?;
        let grid = build_grid(&self.spec, &region, h).map_err(num_err)?;
        let op = assemble_shared(&self.spec, Arc::new(grid), true).map_err(num_err)?;
        Ok(PyOperator { op })
    }
}

#[pyclass(name = "Operator", frozen)]
struct PyOperator {
    op: DiscreteOperator,
}

#[pymethods]
impl PyOperator {
    #[getter]
    fn rows(&self) -> usize {
        self.op.n()
    }

    /// `(x, regime)` of each row, regimes 1-based.
    fn nodes(&self) -> Vec<(Vec<f64>, usize)> {
        let g = &self.op.grid;
        (0..g.n_rows()).map(|r| (g.row_x(r), g.row_regime(r) + 1)).collect()
    }

    fn to_dense(&self) -> Vec<Vec<f64>> {
        self.op.to_dense()
    }

    fn apply(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        if u.len() != self.op.n() {
            return Err(value_err(format!("expected {} values", self.op.n())));
        }
        Ok(self.op.apply(&u, None))
    }

    fn matrix_market(&self) -> PyResult<String> {
        let mut buf = vec![];
        self.op.write_matrix_market(&mut buf).map_err(num_err)?;
        String::from_utf8(buf).map_err(num_err)
    }

    #[pyo3(signature = (tol = DEFAULT_TOL, max_iter = DEFAULT_MAX_ITER))]
    fn principal_eigenpair(&self, tol: f64, max_iter: usize) -> PyResult<PyEigenPair> {
        Ok(PyEigenPair { pair: principal_eigenpair(&self.op, tol, max_iter).map_err(num_err)? })
    }
}

/// Stored with the convention `A Ψ = -λ Ψ`.
#[pyclass(name = "EigenPair", frozen)]
struct PyEigenPair {
    pair: EigenPair,
}

#[pymethods]
impl PyEigenPair {
    #[getter]
    fn lambda_(&self) -> f64 {
        self.pair.lambda
    }

    #[getter]
    fn bracket(&self) -> (f64, f64) {
        self.pair.bracket
    }

    #[getter]
    fn psi(&self) -> Vec<f64> {
        self.pair.psi.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.pair.iterations
    }

    fn __repr__(&self) -> String {
        format!("EigenPair(lambda={}, bracket={:?})", self.pair.lambda, self.pair.bracket)
    }
}

#[pyclass(name = "PrincipalLimit", frozen, get_all)]
struct PyLimit {
    radii: Vec<f64>,
    lambdas: Vec<f64>,
    brackets: Vec<(f64, f64)>,
    lambda_star: f64,
    uncertainty: f64,
    extrapolated: bool,
    converged: bool,
    /// `(x, regime, value)` on the inner window.
    window_profile: Vec<(Vec<f64>, usize, f64)>,
}

#[pyfunction]
#[pyo3(signature = (problem, radii, h, tol = DEFAULT_TOL, inner_radius = DEFAULT_INNER_RADIUS))]
fn lambda_star(problem: &PyProblem, radii: Vec<f64>, h: f64, tol: f64, inner_radius: f64) -> PyResult<PyLimit> {
    let pl = lambda_star_with(&problem.spec, &radii, h, tol, inner_radius).map_err(num_err)?;
    Ok(PyLimit {
        window_profile: pl.window_profile.iter().map(|p| (p.x.clone(), p.regime + 1, p.value)).collect(),
        radii: pl.radii,
        lambdas: pl.lambdas,
        brackets: pl.brackets,
        lambda_star: pl.lambda_star,
        uncertainty: pl.uncertainty,
        extrapolated: pl.extrapolated,
        converged: pl.converged,
    })
}

fn verdict(v: &Verdict) -> (String, Vec<(f64, f64)>) {
    (v.classification.to_string(), v.evidence.clone())
}

/// `(classification, [(radius, max of u on the inner window)])`.
#[pyfunction]
#[pyo3(signature = (problem, radii, h, c = 1.0, reg_tol = coopeig::stability::DEFAULT_REG_TOL))]
fn regularity(problem: &PyProblem, radii: Vec<f64>, h: f64, c: f64, reg_tol: f64) -> PyResult<(String, Vec<(f64, f64)>)> {
    let src = GeneratorSource::Spec { spec: problem.spec.clone(), h };
    let v = regularity_test(&src, c, &radii, &RegularityOptions { reg_tol, inner_radius: None }).map_err(num_err)?;
    Ok(verdict(&v))
}

/// Recurrence of the ball of radius `ball` (over `regimes`, 1-based).
#[pyfunction]
#[pyo3(signature = (problem, ball, radii, h, regimes = None, hit_tol = coopeig::stability::DEFAULT_HIT_TOL))]
fn recurrence(
    problem: &PyProblem,
    ball: f64,
    radii: Vec<f64>,
    h: f64,
    regimes: Option<Vec<usize>>,
    hit_tol: f64,
) -> PyResult<(String, Vec<(f64, f64)>)> {
    let target = RegionCfg { ball: Some(ball), center: None, bx: None, regimes }
        .to_region(problem.spec.dim, problem.spec.regimes)
        .map_err(value_err)?;
    let src = GeneratorSource::Spec { spec: problem.spec.clone(), h };
    let r = recurrence_test(&src, &target, &radii, &RecurrenceOptions { hit_tol, inner_radius: None }).map_err(num_err)?;
    Ok(verdict(&r.verdict))
}

type Endpoints = Vec<(Vec<f64>, usize)>;

/// Simulates to time `horizon`; returns the mean and standard error of
/// `∫ c dt` and the final positions and regimes (1-based).
#[pyfunction]
#[pyo3(signature = (problem, x, regime, horizon, dt = 1e-3, n_paths = 1000, seed = 0))]
fn simulate(
    py: Python<'_>,
    problem: &PyProblem,
    x: Vec<f64>,
    regime: usize,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> PyResult<((f64, f64), Endpoints)> {
    if regime == 0 || regime > problem.spec.regimes {
        return Err(value_err("regime is 1-based"));
    }
    let spec = problem.spec.clone();
    let batch = py
        .detach(|| {
            let cfg = SimConfig::new(dt, horizon, n_paths, seed);
            sde_simulate(&Dynamics::base(&spec), &cfg, &Functional::Terminal { t: horizon }, 0.0, &x, regime - 1)
        })
        .map_err(num_err)?;
    let lf: Vec<f64> = batch.records.iter().map(|r| r.log_functional).collect();
    Ok((mean_se(&lf), batch.records.iter().map(|r| (r.x.clone(), r.regime + 1)).collect()))
}

/// Runs a config file as the `coopeig run` command does; returns the exit
/// code.
#[pyfunction]
#[pyo3(signature = (config, out = None, threads = None, seed = None))]
fn run_config(py: Python<'_>, config: PathBuf, out: Option<PathBuf>, threads: Option<usize>, seed: Option<u64>) -> i32 {
    py.detach(|| run(&RunArgs { config, out, threads, seed }).code)
}

#[pymodule(name = "coopeig")]
fn coopeig_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PyOperator>()?;
    m.add_class::<PyEigenPair>()?;
    m.add_class::<PyLimit>()?;
    m.add_function(wrap_pyfunction!(lambda_star, m)?)?;
    m.add_function(wrap_pyfunction!(regularity, m)?)?;
    m.add_function(wrap_pyfunction!(recurrence, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
