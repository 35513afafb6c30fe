//! Python bindings: `import robust_harvest`.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::robust_harvest::{
    self as rh, AmbiguityProblem, CoefficientModel, HarvestError, Measure, ShootingConfig, SimConfig,
    TabulatedCoefficients, ThresholdSolution,
};

pyo3::create_exception!(robust_harvest, AssumptionError, pyo3::exceptions::PyException);

fn to_py(e: HarvestError) -> PyErr {
    match e {
        HarvestError::InvalidInput(_) | HarvestError::Precondition(_) => PyValueError::new_err(e.to_string()),
        HarvestError::AssumptionViolation { .. } => AssumptionError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Drift and volatility coefficients.
#[pyclass(name = "Model", module = "robust_harvest", frozen)]
struct PyModel(CoefficientModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn verhulst_pearl(mu_bar: f64, gamma_bar: f64, sigma_bar: f64) -> PyResult<Self> {
        CoefficientModel::verhulst_pearl(mu_bar, gamma_bar, sigma_bar).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn general_logistic(mu_bar: f64, gamma_bar: f64, sigma_bar: f64, theta: f64) -> PyResult<Self> {
        let m = CoefficientModel::GeneralLogistic { mu_bar, gamma_bar, sigma_bar, theta };
        m.validate().map_err(to_py)?;
        Ok(Self(m))
    }

    #[staticmethod]
    fn tabulated(xs: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> PyResult<Self> {
        let m = CoefficientModel::Tabulated(TabulatedCoefficients::new(xs, mu, sigma).map_err(to_py)?);
        m.validate().map_err(to_py)?;
        Ok(Self(m))
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.0.family_name()
    }

    fn mu(&self, x: f64) -> f64 {
        self.0.mu(x)
    }

    fn sigma(&self, x: f64) -> f64 {
        self.0.sigma(x)
    }

    /// `x mu(x) - eps sigma(x)^2 / 2`.
    fn lambda_eps(&self, eps: f64, x: f64) -> f64 {
        self.0.lambda(eps, x)
    }

    fn __repr__(&self) -> String {
        format!("Model({:?})", self.0)
    }
}

/// A model together with an ambiguity level.
#[pyclass(name = "Problem", module = "robust_harvest", frozen)]
struct PyProblem(AmbiguityProblem);

#[pymethods]
impl PyProblem {
    #[new]
    #[pyo3(signature = (model, epsilon, x_max = None))]
    fn new(model: &PyModel, epsilon: f64, x_max: Option<f64>) -> PyResult<Self> {
        let p = AmbiguityProblem::new(model.0.clone(), epsilon).map_err(to_py)?;
        let p = match x_max {
            Some(x) => p.with_x_max(x).map_err(to_py)?,
            None => p,
        };
        Ok(Self(p))
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.0.epsilon
    }

    #[getter]
    fn x_eps(&self) -> f64 {
        self.0.x_eps
    }

    #[getter]
    fn x_bar_eps(&self) -> f64 {
        self.0.x_bar_eps
    }

    #[getter]
    fn x_max(&self) -> f64 {
        self.0.x_max
    }

    /// List of `(assumption, name, passed, detail)` tuples.
    fn check_assumptions(&self) -> Vec<(String, String, bool, String)> {
        self.0
            .check_assumptions()
            .checks
            .into_iter()
            .map(|c| (c.assumption.to_string(), c.name.to_string(), c.passed, c.detail))
            .collect()
    }

    fn assumptions_hold(&self) -> bool {
        self.0.check_assumptions().all_passed()
    }
}

/// Threshold, value and tabulated potential.
#[pyclass(name = "Solution", module = "robust_harvest", frozen)]
struct PySolution {
    problem: AmbiguityProblem,
    sol: ThresholdSolution,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn beta(&self) -> f64 {
        self.sol.beta_eps
    }

    #[getter]
    fn ell(&self) -> f64 {
        self.sol.ell_eps
    }

    #[getter]
    fn beta_tolerance(&self) -> f64 {
        self.sol.beta_tolerance
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.sol.iterations
    }

    #[getter]
    fn x_min_shift(&self) -> Option<f64> {
        self.sol.x_min_shift
    }

    #[getter]
    fn xs(&self) -> Vec<f64> {
        self.sol.v_grid.xs.clone()
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.sol.v_grid.v.clone()
    }

    #[getter]
    fn vprime(&self) -> Vec<f64> {
        self.sol.v_grid.vprime.clone()
    }

    /// HJB residuals as a dict; `pass` is the overall verdict.
    fn verify<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = rh::verify_solution(&self.problem, &self.sol).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("max_abs_residual_left", r.max_abs_residual_left)?;
        d.set_item("max_excess_right", r.max_excess_right)?;
        d.set_item("min_vprime_left", r.min_vprime_left)?;
        d.set_item("pasting_residuals", r.pasting_residuals)?;
        d.set_item("fd_max_rel_error", r.fd_max_rel_error)?;
        d.set_item("sigma_bound_excess", r.sigma_bound_excess)?;
        d.set_item("pass", r.pass)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Solution(beta={}, ell={})", self.sol.beta_eps, self.sol.ell_eps)
    }
}

/// Bisects for the threshold and builds the potential.
#[pyfunction]
#[pyo3(signature = (problem, rtol = None, atol = None, tail_test = true, sensitivity_check = true))]
fn solve(
    py: Python<'_>,
    problem: &PyProblem,
    rtol: Option<f64>,
    atol: Option<f64>,
    tail_test: bool,
    sensitivity_check: bool,
) -> PyResult<PySolution> {
    let mut cfg = ShootingConfig { tail_test, sensitivity_check, ..ShootingConfig::default() };
    if let Some(r) = rtol {
        cfg.rtol = r;
    }
    if let Some(a) = atol {
        cfg.atol = a;
    }
    let p = problem.0.clone();
    let sol = py.detach(|| rh::solve_beta(&p, &cfg)).map_err(to_py)?;
    Ok(PySolution { problem: p, sol })
}

/// Monte Carlo estimate of the long-run payoff of the threshold policy.
#[pyfunction]
#[pyo3(signature = (solution, measure = "worstcase", n_paths = 256, dt = 1e-4, horizon = 200.0, seed = 0, x0 = None, burn_in = 0.1))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    solution: &PySolution,
    measure: &str,
    n_paths: usize,
    dt: f64,
    horizon: f64,
    seed: u64,
    x0: Option<f64>,
    burn_in: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let beta = solution.sol.beta_eps;
    let measure = match measure {
        "reference" => Measure::Reference,
        "worstcase" => Measure::WorstCase(Arc::new(solution.sol.v_grid.clone())),
        other => return Err(PyValueError::new_err(format!("measure must be 'reference' or 'worstcase', got '{other}'"))),
    };
    let mut cfg = SimConfig::new(solution.problem.clone(), beta, measure, seed);
    cfg.n_paths = n_paths;
    cfg.dt = dt;
    cfg.horizon = horizon;
    cfg.burn_in = burn_in;
    cfg.x0 = x0.unwrap_or(beta);
    let est = py.detach(|| rh::estimate_payoff(&cfg)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mean", est.mean)?;
    d.set_item("std_error", est.std_error)?;
    d.set_item("n_paths", est.n_paths)?;
    d.set_item("aborted", est.aborted)?;
    d.set_item("half_means", est.half_means)?;
    d.set_item("negative_clip_fraction", est.negative_clip_fraction)?;
    d.set_item("histogram", est.histogram)?;
    d.set_item("payoffs", est.per_path.iter().map(|p| p.payoff_estimate).collect::<Vec<_>>())?;
    Ok(d)
}

/// Solves at each ambiguity level; returns one dict per level.
#[pyfunction]
#[pyo3(signature = (model, eps_grid, x_max = None))]
fn sweep<'py>(py: Python<'py>, model: &PyModel, eps_grid: Vec<f64>, x_max: Option<f64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let m = model.0.clone();
    let rows = py.detach(|| rh::sweep(&m, &eps_grid, x_max, &ShootingConfig::default())).map_err(to_py)?;
    rows.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epsilon", r.epsilon)?;
            d.set_item("x_eps", r.x_eps)?;
            d.set_item("x_bar_eps", r.x_bar_eps)?;
            d.set_item("beta", r.beta_eps)?;
            d.set_item("ell", r.ell_eps)?;
            d.set_item("iterations", r.iterations)?;
            d.set_item("error", r.error)?;
            Ok(d)
        })
        .collect()
}

/// Lower and upper ends of the threshold bracket.
#[pyfunction]
fn bracket(model: &PyModel, epsilon: f64) -> PyResult<(f64, f64)> {
    rh::bracket_points(&model.0, epsilon).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "robust_harvest")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PySolution>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(bracket, m)?)?;
    m.add("AssumptionError", m.py().get_type::<AssumptionError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
