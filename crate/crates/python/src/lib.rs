//! Python bindings for `stochbt`. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stochbt::analysis;
use stochbt::balancing::{self, BalancingSetup};
use stochbt::benchmark::{self, HeatBenchmarkConfig};
use stochbt::operators::{self, HAUTUS_TOL};
use stochbt::simulate::{self, ControlSpec, ErrorSystemMode, InitialState, InputSignal, SimulationConfig};
use stochbt::solvers::{self, ReachabilityStrategy, SolverConfig};
use stochbt::Error;

fn py_err(e: Error) -> PyErr {
    if e.exit_code() == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

pub fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyclass(name = "StochasticSystem", module = "stochbt_py", from_py_object)]
#[derive(Clone)]
pub struct PySystem {
    inner: stochbt::StochasticSystem,
}

#[pymethods]
impl PySystem {
    /// `dx = (Ax + Bu) dt + Σ N_i x dW_i`, `y = Cx`, noise covariance `K` (identity by default).
    #[new]
    #[pyo3(signature = (a, n, b, c, k=None))]
    fn new(a: Vec<Vec<f64>>, n: Vec<Vec<Vec<f64>>>, b: Vec<Vec<f64>>, c: Vec<Vec<f64>>, k: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let noise = n.iter().map(|m| to_matrix(m)).collect::<PyResult<Vec<_>>>()?;
        let k = match k {
            Some(k) => to_matrix(&k)?,
            None => DMatrix::identity(noise.len(), noise.len()),
        };
        let inner = stochbt::StochasticSystem::new(to_matrix(&a)?, noise, to_matrix(&b)?, to_matrix(&c)?, k).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Modal Galerkin model of the controlled heat equation with multiplicative noise.
    #[staticmethod]
    #[pyo3(signature = (n=36, alpha=0.2, nu=2.0, quad_points=64))]
    fn heat_benchmark(n: usize, alpha: f64, nu: f64, quad_points: usize) -> PyResult<Self> {
        let cfg = HeatBenchmarkConfig { n, alpha, nu, quad_points };
        Ok(Self { inner: benchmark::build_heat_system(&cfg).map_err(py_err)? })
    }

    /// Reads a system bundle directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: stochbt::io::load_system(&dir).map_err(py_err)?.0 })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        stochbt::io::save_system(&dir, &self.inner, serde_json::Map::new()).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }
    #[getter]
    fn inputs(&self) -> usize {
        self.inner.inputs()
    }
    #[getter]
    fn outputs(&self) -> usize {
        self.inner.outputs()
    }
    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.a())
    }
    #[getter]
    fn b(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.b())
    }
    #[getter]
    fn c(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.c())
    }
    #[getter]
    fn noise(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.noise().iter().map(to_rows).collect()
    }

    /// Returns `(abscissa, stable)` of the generalized Lyapunov operator.
    fn mean_square_stability(&self) -> PyResult<(f64, bool)> {
        let c = operators::mean_square_stability(&self.inner).map_err(py_err)?;
        Ok((c.abscissa, c.stable))
    }

    fn is_detectable(&self) -> PyResult<bool> {
        Ok(operators::hautus_detectability(&self.inner, HAUTUS_TOL).map_err(py_err)?.holds)
    }

    fn is_stabilizable(&self) -> PyResult<bool> {
        Ok(operators::stabilizability_probe(&self.inner).map_err(py_err)?.stabilizable)
    }

    fn __repr__(&self) -> String {
        format!("StochasticSystem(n={}, m={}, p={}, q={})", self.inner.n(), self.inner.inputs(), self.inner.outputs(), self.inner.channels())
    }
}

#[pyclass(name = "GramianPair", module = "stochbt_py", skip_from_py_object)]
pub struct PyGramians {
    inner: solvers::GramianPair,
}

#[pymethods]
impl PyGramians {
    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.p)
    }
    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.q)
    }
    #[getter]
    fn q_residual(&self) -> f64 {
        self.inner.q_residual
    }
    #[getter]
    fn p_margin(&self) -> f64 {
        self.inner.p_margin
    }
    #[getter]
    fn closed_loop_abscissa(&self) -> f64 {
        self.inner.closed_loop_certificate.abscissa
    }
}

fn strategy(name: &str, sdp_dir: Option<PathBuf>) -> PyResult<ReachabilityStrategy> {
    ReachabilityStrategy::parse(name, sdp_dir.as_deref()).map_err(py_err)
}

/// Riccati solution `Q` and LMI-feasible `P` of a system.
#[pyfunction]
#[pyo3(signature = (system, strategy="subgradient_feasibility", tol=1e-10, sdp_dir=None))]
fn compute_gramians(system: &PySystem, strategy: &str, tol: f64, sdp_dir: Option<PathBuf>) -> PyResult<PyGramians> {
    let cfg = SolverConfig { tol, ..Default::default() };
    let s = self::strategy(strategy, sdp_dir)?;
    Ok(PyGramians { inner: solvers::compute_gramians(&system.inner, &cfg, &s).map_err(py_err)? })
}

#[pyclass(name = "ReducedModel", module = "stochbt_py", skip_from_py_object)]
pub struct PyReduced {
    inner: balancing::ReducedModel,
}

#[pymethods]
impl PyReduced {
    #[getter]
    fn system(&self) -> PySystem {
        PySystem { inner: self.inner.system.clone() }
    }
    #[getter]
    fn r(&self) -> usize {
        self.inner.r
    }
    #[getter]
    fn sigma(&self) -> Vec<f64> {
        self.inner.sigma_r.clone()
    }
    /// Lifting map onto the full state.
    #[getter]
    fn v(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.v)
    }
    /// Projection from the full state.
    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.w)
    }
}

/// Gramians on the observable part, balancing transformation and singular values.
#[pyclass(name = "Balancing", module = "stochbt_py", skip_from_py_object)]
pub struct PyBalancing {
    inner: BalancingSetup,
    full: stochbt::StochasticSystem,
}

#[pymethods]
impl PyBalancing {
    #[new]
    #[pyo3(signature = (system, strategy="subgradient_feasibility", tol=1e-10))]
    fn new(system: &PySystem, strategy: &str, tol: f64) -> PyResult<Self> {
        let cfg = SolverConfig { tol, ..Default::default() };
        let s = self::strategy(strategy, None)?;
        let inner = balancing::prepare_balancing(&system.inner, &cfg, &s).map_err(py_err)?;
        Ok(Self { inner, full: system.inner.clone() })
    }

    #[getter]
    fn sigma(&self) -> Vec<f64> {
        self.inner.balanced.sigma.clone()
    }

    /// Dimension of the observable part.
    #[getter]
    fn observable_dim(&self) -> usize {
        self.inner.restriction.system.n()
    }

    /// Q on the full state space.
    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.q_full())
    }

    fn reduce(&self, r: usize) -> PyResult<PyReduced> {
        Ok(PyReduced { inner: self.inner.reduce(r).map_err(py_err)? })
    }

    /// Smallest order whose tail coefficient is below `rel_tol · σ̂₁`, with a warning flag.
    fn choose_order(&self, rel_tol: f64) -> PyResult<(usize, bool)> {
        let c = balancing::choose_order(&self.inner.balanced.sigma, rel_tol).map_err(py_err)?;
        Ok((c.r, c.warning))
    }

    /// Tail coefficient `2 Σ_{k>r} σ̂_k`.
    fn tail_coefficient(&self, r: usize) -> f64 {
        balancing::tail_coefficient(&self.inner.balanced.sigma, r)
    }

    /// Closed-loop error bound for a given `‖u¹‖_{L²}`.
    fn feedback_bound(&self, r: usize, norm_u1: f64) -> PyResult<f64> {
        analysis::feedback_bound(&self.inner.balanced.sigma, r, norm_u1).map_err(py_err)
    }

    /// Weight β of the exponentially weighted open-loop bound.
    fn beta(&self) -> f64 {
        let sub = &self.inner.restriction.system;
        analysis::beta(sub, &self.inner.gramians.p, &self.inner.gramians.q)
    }

    /// Weighted open-loop bound for a given weighted input norm.
    fn weighted_bound(&self, r: usize, weighted_input_norm: f64) -> PyResult<f64> {
        analysis::weighted_bound(&self.inner.balanced.sigma, r, self.beta(), weighted_input_norm).map_err(py_err)
    }

    /// Whether the reduced model keeps closed-loop stability, detectability and the type-II inequalities.
    fn preservation_holds(&self, r: usize) -> PyResult<bool> {
        let red = balancing::truncate(&self.inner.balanced, r).map_err(py_err)?;
        Ok(analysis::preservation_certificates(&self.inner.balanced, &red).map_err(py_err)?.passed)
    }

    /// Squared-output trajectories of the closed-loop error pair for the reference input.
    #[pyo3(signature = (r, t_end=10.0, dt=1e-2))]
    fn closed_loop_error<'py>(&self, py: Python<'py>, r: usize, t_end: f64, dt: f64) -> PyResult<Bound<'py, PyDict>> {
        let red = self.inner.reduce(r).map_err(py_err)?;
        let q = self.inner.q_full();
        let err = simulate::build_error_system(&self.full, &red, &ErrorSystemMode::ClosedLoop { q: q.clone() }).map_err(py_err)?;
        let pair = err.with_c(simulate::feedback_pair_output(&self.full, &red, &q)).map_err(py_err)?;
        let control = ControlSpec::OpenLoop(InputSignal::broadcast(self.full.inputs(), benchmark::reference_input));
        let cfg = SimulationConfig { t_end, dt, ..Default::default() };
        let traj = simulate::propagate_moments(&pair, &control, &cfg).map_err(py_err)?;
        let u1 = simulate::trapezoid(&traj.t, &traj.input_energy).sqrt();
        let d = PyDict::new(py);
        d.set_item("t", &traj.t)?;
        d.set_item("pair_energy", &traj.output_energy)?;
        d.set_item("pair_l2", simulate::trapezoid(&traj.t, &traj.output_energy).sqrt())?;
        d.set_item("bound", analysis::feedback_bound(&self.inner.balanced.sigma, r, u1).map_err(py_err)?)?;
        Ok(d)
    }
}

fn control_spec(control: &str, m: usize) -> PyResult<ControlSpec> {
    match control {
        "zero" => Ok(ControlSpec::Zero),
        "reference" => Ok(ControlSpec::OpenLoop(InputSignal::broadcast(m, benchmark::reference_input))),
        other => Err(PyValueError::new_err(format!("unknown control '{other}' (expected 'zero' or 'reference')"))),
    }
}

fn initial(x0: Option<Vec<f64>>, random: bool) -> InitialState {
    match x0 {
        Some(x) => InitialState::Fixed(DVector::from_vec(x)),
        None if random => InitialState::RandomUnit,
        None => InitialState::Zero,
    }
}

/// Second-moment trajectory: `t`, `output_energy`, `input_energy`, `state_energy`.
#[pyfunction]
#[pyo3(signature = (system, control="zero", t_end=10.0, dt=1e-2, x0=None, random_x0=false, seed=0))]
fn propagate_moments<'py>(
    py: Python<'py>,
    system: &PySystem,
    control: &str,
    t_end: f64,
    dt: f64,
    x0: Option<Vec<f64>>,
    random_x0: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = control_spec(control, system.inner.inputs())?;
    let cfg = SimulationConfig { t_end, dt, seed, x0: initial(x0, random_x0), ..Default::default() };
    let traj = simulate::propagate_moments(&system.inner, &spec, &cfg).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("t", &traj.t)?;
    d.set_item("output_energy", &traj.output_energy)?;
    d.set_item("input_energy", &traj.input_energy)?;
    d.set_item("state_energy", &traj.state_energy)?;
    Ok(d)
}

/// Euler–Maruyama Monte Carlo: `t`, `mean_output_energy`, `se_output_energy`.
#[pyfunction]
#[pyo3(signature = (system, paths, control="zero", t_end=1.0, dt=1e-2, seed=0, x0=None, random_x0=false))]
fn monte_carlo<'py>(
    py: Python<'py>,
    system: &PySystem,
    paths: usize,
    control: &str,
    t_end: f64,
    dt: f64,
    seed: u64,
    x0: Option<Vec<f64>>,
    random_x0: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = control_spec(control, system.inner.inputs())?;
    let cfg = SimulationConfig { t_end, dt, seed, n_paths: paths, x0: initial(x0, random_x0), ..Default::default() };
    let batch = py.detach(|| simulate::integrate_sde(&system.inner, &spec, &cfg)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("t", &batch.t)?;
    d.set_item("mean_output_energy", &batch.mean_output_energy)?;
    d.set_item("se_output_energy", &batch.se_output_energy)?;
    Ok(d)
}

/// Full system driven by the reduced stabilizing feedback.
#[pyfunction]
fn reduced_feedback_system(system: &PySystem, reduced: &PyReduced) -> PyResult<PySystem> {
    let inner = simulate::reduced_feedback_on_full(&system.inner, &reduced.inner).map_err(py_err)?;
    Ok(PySystem { inner })
}

/// Open-loop error system with output `y − y_r`.
#[pyfunction]
fn error_system(system: &PySystem, reduced: &PyReduced) -> PyResult<PySystem> {
    let inner = simulate::build_error_system(&system.inner, &reduced.inner, &ErrorSystemMode::OpenLoop).map_err(py_err)?;
    Ok(PySystem { inner })
}

/// Runs the command-line tool with the given arguments and returns its exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("stochbt".to_string()).chain(args);
    py.detach(|| stochbt::cli::main_with_args(argv))
}

#[pymodule]
pub fn stochbt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyGramians>()?;
    m.add_class::<PyReduced>()?;
    m.add_class::<PyBalancing>()?;
    m.add_function(wrap_pyfunction!(compute_gramians, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_moments, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(reduced_feedback_system, m)?)?;
    m.add_function(wrap_pyfunction!(error_system, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
