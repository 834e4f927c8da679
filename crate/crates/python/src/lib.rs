//! Python bindings: configs, models, ambiguity sets, the two inner-problem
//! routes, the backward recursion, safe sets, the controller and Monte Carlo.

use std::path::PathBuf;
use std::sync::Arc;

use drsafe::config::{RunConfig, SolveKind};
use drsafe::{
    monte_carlo, primal_value, solve_dual, solve_recursion, threshold, BoxRegion, ControlSet, Dynamics, Model,
    MomentAmbiguitySet, Payoff, PiecewiseLinear, SafeSetFamily, SafetyOrientedController, SipOptions, Solution,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_kind(kind: &str) -> PyResult<SolveKind> {
    match kind {
        "robust" => Ok(SolveKind::Robust),
        "nominal" => Ok(SolveKind::Nominal),
        other => Err(value_err(format!(
            "kind must be \"robust\" or \"nominal\", got {other:?}"
        ))),
    }
}

/// Parsed and validated run configuration.
#[pyclass(name = "Config", frozen)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Parse config text; an empty string gives the TCL defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        RunConfig::parse(text).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn canonical(&self) -> String {
        self.inner.canonical()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.model.horizon
    }

    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.build_model(),
        }
    }

    fn ambiguity(&self) -> PyResult<PyAmbiguitySet> {
        match self.inner.ambiguity_schedule(None, None).map_err(value_err)? {
            drsafe::Schedule::Shared(a) => Ok(PyAmbiguitySet { inner: a }),
            drsafe::Schedule::PerStage(v) => Ok(PyAmbiguitySet { inner: v[0].clone() }),
        }
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", &self.inner.hash()[..16])
    }
}

/// Discrete-time model with a box safe set and a finite control list.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn tcl() -> Self {
        Self {
            inner: drsafe::tcl_preset(),
        }
    }

    /// `x' = a x + b u + c + g w` on the safe box `[safe_lo, safe_hi]`.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    fn affine(
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
        g: Vec<Vec<f64>>,
        safe_lo: Vec<f64>,
        safe_hi: Vec<f64>,
        controls: Vec<Vec<f64>>,
        horizon: usize,
    ) -> PyResult<Self> {
        let desc = drsafe::model::AffineDescriptor::from_rows(&a, &b, c, &g).map_err(value_err)?;
        let model = Model::new(
            Dynamics::affine(desc),
            BoxRegion::new(safe_lo, safe_hi).map_err(value_err)?,
            ControlSet::new(controls).map_err(value_err)?,
            horizon,
        )
        .map_err(value_err)?;
        Ok(Self { inner: model })
    }

    fn step(&self, x: Vec<f64>, u: Vec<f64>, w: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.step(&x, &u, &w).map_err(value_err)
    }

    fn is_safe(&self, x: Vec<f64>) -> bool {
        self.inner.safe_region.contains(&x)
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn controls(&self) -> Vec<Vec<f64>> {
        self.inner.controls.controls().to_vec()
    }
}

/// Moment ambiguity set on a box support.
#[pyclass(name = "AmbiguitySet", frozen)]
struct PyAmbiguitySet {
    inner: MomentAmbiguitySet,
}

#[pymethods]
impl PyAmbiguitySet {
    /// Scalar set `{|E w - m| <= b, E (w - m)^2 <= c sigma2}` on `[lo, hi]`.
    #[new]
    #[pyo3(signature = (lo, hi, mean, mean_tol, sigma2, scale = 1.0))]
    fn new(lo: f64, hi: f64, mean: f64, mean_tol: f64, sigma2: f64, scale: f64) -> PyResult<Self> {
        MomentAmbiguitySet::scalar(lo, hi, mean, mean_tol, sigma2, scale)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn is_feasible(&self) -> PyResult<bool> {
        Ok(self.inner.check_feasible().map_err(runtime_err)?.feasible)
    }

    fn widened(&self, mean_tol: f64, scale: f64) -> PyResult<Self> {
        let inner = self
            .inner
            .with_mean_tol(vec![mean_tol; self.inner.dim()])
            .and_then(|a| a.with_scale(scale))
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn support(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.inner.support();
        (s.lo().to_vec(), s.hi().to_vec())
    }
}

fn payoff(amb: &MomentAmbiguitySet, xs: &[f64], ys: &[f64]) -> PyResult<PiecewiseLinear> {
    if amb.dim() != 1 {
        return Err(value_err("piecewise-linear payoffs need a scalar disturbance"));
    }
    PiecewiseLinear::from_breakpoints(xs, ys).map_err(value_err)
}

/// Worst-case expectation of a piecewise-linear payoff by the atomized LP.
#[pyfunction]
#[pyo3(signature = (amb, xs, ys, atoms = 4096))]
fn primal(py: Python<'_>, amb: &PyAmbiguitySet, xs: Vec<f64>, ys: Vec<f64>, atoms: usize) -> PyResult<f64> {
    let pwl = payoff(&amb.inner, &xs, &ys)?;
    py.detach(|| primal_value(&amb.inner, |w| pwl.eval(w[0]), atoms))
        .map(|s| s.value)
        .map_err(runtime_err)
}

/// Same quantity by the exchange method; returns a dict with the value and
/// certificate diagnostics.
#[pyfunction]
#[pyo3(signature = (amb, xs, ys, feas_tol = None))]
fn dual<'py>(
    py: Python<'py>,
    amb: &PyAmbiguitySet,
    xs: Vec<f64>,
    ys: Vec<f64>,
    feas_tol: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let pwl = payoff(&amb.inner, &xs, &ys)?;
    let mut opts = SipOptions::default();
    if let Some(t) = feas_tol {
        opts.feas_tol = t;
    }
    let cert = py
        .detach(|| solve_dual(&Payoff::Piecewise(pwl), &amb.inner, &opts))
        .map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("value", cert.value)?;
    d.set_item("raw_objective", cert.raw_objective)?;
    d.set_item("iterations", cert.iterations)?;
    d.set_item("converged", cert.converged)?;
    d.set_item("residual", cert.residual)?;
    d.set_item("nu", cert.multipliers.nu)?;
    d.set_item("second", cert.multipliers.second.clone())?;
    Ok(d)
}

/// Value functions `v_0..v_T` and policies `phi_0..phi_{T-1}` on the grid.
#[pyclass(name = "Solution", frozen)]
struct PySolution {
    cfg: RunConfig,
    kind: SolveKind,
    inner: Arc<Solution>,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.kind.label()
    }

    /// Grid nodes, one coordinate list per node.
    fn nodes(&self) -> Vec<Vec<f64>> {
        let grid = self.inner.values[0].grid();
        (0..grid.len()).map(|k| grid.node(k)).collect()
    }

    fn values(&self, t: usize) -> PyResult<Vec<f64>> {
        self.inner
            .values
            .get(t)
            .map(|v| v.values().to_vec())
            .ok_or_else(|| value_err(format!("stage {t} is beyond the horizon")))
    }

    fn policy(&self, t: usize) -> PyResult<Vec<usize>> {
        self.inner
            .policies
            .get(t)
            .cloned()
            .ok_or_else(|| value_err(format!("no policy at stage {t}")))
    }

    /// Interpolated `v_t(x)`.
    fn value(&self, t: usize, x: Vec<f64>) -> PyResult<f64> {
        let v = self
            .inner
            .values
            .get(t)
            .ok_or_else(|| value_err(format!("stage {t} is beyond the horizon")))?;
        Ok(v.eval(&x))
    }

    /// Safe sets at level `alpha`, as closed intervals per stage (scalar state).
    fn safe_intervals(&self, alpha: f64, t: usize) -> PyResult<Vec<(f64, f64)>> {
        let sets: SafeSetFamily = threshold(&self.inner.values, alpha).map_err(value_err)?;
        if t > sets.horizon() {
            return Err(value_err(format!("stage {t} is beyond the horizon")));
        }
        Ok(sets.intervals(t))
    }

    #[pyo3(signature = (alpha = None))]
    fn controller(&self, alpha: Option<f64>) -> PyResult<PyController> {
        let alpha = alpha.unwrap_or(self.cfg.alpha);
        let inner = SafetyOrientedController::from_solution(
            self.cfg.build_model(),
            &self.inner,
            alpha,
            drsafe::Fallback::Constant(self.cfg.fallback),
            self.cfg.supports(self.kind),
        )
        .map_err(value_err)?;
        Ok(PyController {
            inner,
            cfg: self.cfg.clone(),
        })
    }
}

/// Backward recursion for a config; `kind` is "robust" or "nominal".
#[pyfunction]
#[pyo3(signature = (config, kind = "robust"))]
fn solve(py: Python<'_>, config: &PyConfig, kind: &str) -> PyResult<PySolution> {
    let kind = parse_kind(kind)?;
    let cfg = config.inner.clone();
    let sol = py
        .detach(|| {
            let model = cfg.build_model();
            let grid = cfg.build_grid(&model);
            let mode = cfg.mode_for(kind)?;
            solve_recursion(&model, &mode, grid, &cfg.backup_options()).map_err(|e| e.to_string())
        })
        .map_err(runtime_err)?;
    Ok(PySolution {
        cfg,
        kind,
        inner: Arc::new(sol),
    })
}

/// Safety-oriented controller built from a solution.
#[pyclass(name = "Controller", frozen)]
struct PyController {
    inner: SafetyOrientedController,
    cfg: RunConfig,
}

#[pymethods]
impl PyController {
    /// `(control index, branch)` with branch "safe" or "fallback".
    fn act(&self, x: Vec<f64>, t: usize) -> PyResult<(usize, &'static str)> {
        if t >= self.inner.horizon() {
            return Err(value_err(format!("stage {t} has no decision")));
        }
        let d = self.inner.act(&x, t);
        Ok((d.control, d.branch.as_str()))
    }

    fn all_safe_next(&self, x: Vec<f64>, t: usize) -> PyResult<bool> {
        if t >= self.inner.horizon() {
            return Err(value_err(format!("stage {t} has no successor")));
        }
        Ok(self.inner.all_safe_next(&x, t))
    }

    /// Monte Carlo under the configured true law; returns a report dict.
    #[pyo3(signature = (samples = None, seed = None, x0 = None))]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        samples: Option<usize>,
        seed: Option<u64>,
        x0: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let sim = &self.cfg.simulation;
        let n = samples.unwrap_or(sim.samples);
        if n == 0 {
            return Err(value_err("samples must be at least 1"));
        }
        let seed = seed.unwrap_or(sim.seed);
        let x0 = x0.unwrap_or_else(|| sim.x0.clone());
        let truth = self.cfg.truth();
        let report = py.detach(|| monte_carlo(&self.inner, &truth, &x0, n, seed));
        let d = PyDict::new(py);
        d.set_item("samples", report.samples)?;
        d.set_item("safe_count", report.safe_count)?;
        d.set_item("probability", report.probability)?;
        d.set_item("std_error", report.standard_error())?;
        d.set_item("seed", report.seed)?;
        let medians: Vec<f64> = report.quantiles.iter().map(|q| q.median).collect();
        d.set_item("median_path", medians)?;
        Ok(d)
    }
}

#[pymodule]
fn drsafe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyAmbiguitySet>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyController>()?;
    m.add_function(wrap_pyfunction!(primal, m)?)?;
    m.add_function(wrap_pyfunction!(dual, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    Ok(())
}
