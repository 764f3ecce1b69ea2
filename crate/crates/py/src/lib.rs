//! Python bindings for `sgtorus`.
//!
//! Fields cross the boundary as row-major lists of floats of length `n * n`,
//! indexed `i * n + j` for the node `(i / n, j / n)`.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sgtorus::config::initial_certificate;
use sgtorus::stepper::{self_convergence, MonitorLimits, StepState};
use sgtorus::{diagnostics, io, oracle, Model, PeriodicField, RunConfig, SgError};

create_exception!(sgtorus, SgtError, PyException, "Solver error; `args[1]` is the CLI exit code.");

fn err(e: SgError) -> PyErr {
    SgtError::new_err((e.to_string(), e.exit_code()))
}

fn model_from(name: &str) -> PyResult<Model> {
    match name {
        "sg" => Ok(Model::Sg),
        "sgsw" => Ok(Model::Sgsw),
        other => Err(err(SgError::ConfigInvalid(vec![format!("unknown model {other:?}")]))),
    }
}

/// A validated run configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses INI text.
    #[staticmethod]
    fn from_ini(text: &str) -> PyResult<Self> {
        sgtorus::parse_and_validate(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        RunConfig::from_file(&path).map(|inner| Self { inner }).map_err(err)
    }

    /// Constant `f = 1`, zero initial field.
    #[staticmethod]
    fn minimal(model: &str, n: usize, dt: f64, t_end: f64) -> PyResult<Self> {
        let inner = RunConfig::minimal(model_from(model)?, n, dt, t_end);
        Self::from_ini(&inner.to_ini())
    }

    fn to_ini(&self) -> String {
        self.inner.to_ini()
    }

    /// Copy with the given fields replaced, revalidated.
    #[pyo3(signature = (*, n=None, dt=None, t_end=None, snapshot_every=None, out_dir=None))]
    fn replace(
        &self,
        n: Option<usize>,
        dt: Option<f64>,
        t_end: Option<f64>,
        snapshot_every: Option<usize>,
        out_dir: Option<PathBuf>,
    ) -> PyResult<Self> {
        let mut cfg = self.inner.clone();
        cfg.n = n.unwrap_or(cfg.n);
        cfg.dt = dt.unwrap_or(cfg.dt);
        cfg.t_end = t_end.unwrap_or(cfg.t_end);
        cfg.snapshot_every = snapshot_every.unwrap_or(cfg.snapshot_every);
        if let Some(dir) = out_dir {
            cfg.out_dir = dir;
        }
        Self::from_ini(&cfg.to_ini())
    }

    #[getter]
    fn model(&self) -> &'static str {
        self.inner.model.name()
    }
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }
    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }
    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.t_end
    }
    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    /// Initial certificate as a dict.
    fn certificate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = initial_certificate(&self.inner).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("lambda_min", c.lambda_min)?;
        d.set_item("lambda_point", (c.lambda_point[0], c.lambda_point[1]))?;
        d.set_item("c0", c.c0)?;
        d.set_item("f_min", c.f_min)?;
        d.set_item("init_min", c.init_min)?;
        d.set_item("init_mean", c.init_mean)?;
        Ok(d)
    }

    /// Initial field samples.
    fn initial_field(&self) -> PyResult<Vec<f64>> {
        self.inner.initial_field().map(PeriodicField::into_samples).map_err(err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(model={:?}, n={}, dt={}, t_end={})",
            self.inner.model.name(),
            self.inner.n,
            self.inner.dt,
            self.inner.t_end
        )
    }
}

/// One stored state of a run.
#[pyclass(name = "State", frozen, skip_from_py_object)]
struct PyState {
    inner: StepState,
}

#[pymethods]
impl PyState {
    #[getter]
    fn step(&self) -> usize {
        self.inner.step
    }
    #[getter]
    fn t(&self) -> f64 {
        self.inner.t
    }
    /// `p` for SG, `h` for SGSW.
    #[getter]
    fn field(&self) -> Vec<f64> {
        self.inner.field.samples().to_vec()
    }
    /// Flow displacement `(w1, w2)` with `flow(x) = x + w(x)`.
    #[getter]
    fn displacement(&self) -> (Vec<f64>, Vec<f64>) {
        let [a, b] = self.inner.flow.displacement();
        (a.samples().to_vec(), b.samples().to_vec())
    }
    fn det_jacobian(&self) -> PyResult<Vec<f64>> {
        self.inner.flow.det_jacobian().map(PeriodicField::into_samples).map_err(err)
    }
    #[getter]
    fn monitors<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = &self.inner.monitors;
        let d = PyDict::new(py);
        d.set_item("nu_sup", m.nu_sup)?;
        d.set_item("convexity_min", m.convexity_min)?;
        d.set_item("step_increment", m.step_increment)?;
        d.set_item("det_err", m.det_err)?;
        d.set_item("mass", m.mass)?;
        Ok(d)
    }
}

/// Output of `run`.
#[pyclass(name = "Trajectory", frozen, skip_from_py_object)]
struct PyTrajectory {
    inner: sgtorus::Trajectory,
    config: RunConfig,
}

#[pymethods]
impl PyTrajectory {
    fn __len__(&self) -> usize {
        self.inner.snapshots.len()
    }

    fn __getitem__(&self, i: isize) -> PyResult<PyState> {
        let len = self.inner.snapshots.len() as isize;
        let k = if i < 0 { i + len } else { i };
        if !(0..len).contains(&k) {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        Ok(PyState {
            inner: self.inner.snapshots[k as usize].clone(),
        })
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.snapshots.iter().map(|s| s.t).collect()
    }

    #[getter]
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = &self.inner.summary;
        let d = PyDict::new(py);
        d.set_item("steps", s.steps)?;
        d.set_item("max_det_err", s.max_det_err)?;
        d.set_item("min_convexity", s.min_convexity)?;
        d.set_item("nu_drift", s.nu_drift)?;
        d.set_item("max_increment_ratio", s.max_increment_ratio)?;
        d.set_item("max_round_trip", s.max_round_trip)?;
        d.set_item("max_mass_drift", s.max_mass_drift)?;
        Ok(d)
    }

    /// Monitor rows, one per step, in `monitors.csv` column order.
    fn records(&self) -> Vec<(usize, f64, f64, f64, f64, f64, f64)> {
        self.inner
            .records
            .iter()
            .map(|r| {
                let m = &r.monitors;
                (r.step, r.t, m.det_err, m.convexity_min, m.nu_sup, m.step_increment, m.mass)
            })
            .collect()
    }

    /// Monitor limits that failed with default thresholds.
    fn violations(&self) -> Vec<String> {
        self.inner.violations(&MonitorLimits::default())
    }

    /// `(t, sup residual)` of the particle equation.
    fn lagrangian_residual(&self) -> PyResult<Vec<(f64, f64)>> {
        let cor = self.config.coriolis().map_err(err)?;
        diagnostics::lagrangian_residual(&self.inner, &cor).map_err(err)
    }

    /// `(t, sup residual)` of the dual-space equation; needs `f = 1`.
    fn dual_residual(&self) -> PyResult<Vec<(f64, f64)>> {
        let cor = self.config.coriolis().map_err(err)?;
        diagnostics::dual_residual(&self.inner, &cor).map_err(err)
    }

    /// `(t, sup gap)` between the reconstructed and particle velocities.
    fn velocity_consistency(&self, tol: f64) -> PyResult<Vec<(f64, f64)>> {
        let cor = self.config.coriolis().map_err(err)?;
        diagnostics::velocity_consistency(&self.inner, self.config.model, &cor, tol).map_err(err)
    }

    /// Writes snapshot `i` to `path`.
    fn write_snapshot(&self, i: usize, path: PathBuf) -> PyResult<()> {
        let state = self
            .inner
            .snapshots
            .get(i)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(i))?;
        let initial = self.config.initial_field().map_err(err)?;
        let snap = io::Snapshot::from_state(state, &initial).map_err(err)?;
        io::write_snapshot(&snap, &path).map_err(err)
    }
}

/// Runs a configuration in memory.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PyTrajectory> {
    let cfg = config.inner.clone();
    let inner = py.detach(|| sgtorus::run(&cfg)).map_err(err)?;
    Ok(PyTrajectory { inner, config: cfg })
}

/// Eulerian diagnostics of one field as a dict of sample lists.
#[pyfunction]
#[pyo3(signature = (config, field, tol=1e-10))]
fn eulerian<'py>(py: Python<'py>, config: &PyConfig, field: Vec<f64>, tol: f64) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let p = PeriodicField::new(cfg.grid().map_err(err)?, field).map_err(err)?;
    let cor = cfg.coriolis().map_err(err)?;
    let snap = diagnostics::eulerian(&p, cfg.model, &cor, tol).map_err(err)?;
    let d = PyDict::new(py);
    let pair = |v: &[PeriodicField; 2]| (v[0].samples().to_vec(), v[1].samples().to_vec());
    d.set_item("u_g", pair(&snap.u_g))?;
    d.set_item("u", pair(&snap.u))?;
    d.set_item("dt_field", snap.dt_field.samples().to_vec())?;
    d.set_item("residual_mass", snap.residual_mass.samples().to_vec())?;
    d.set_item("residual_momentum", pair(&snap.residual_momentum))?;
    Ok(d)
}

/// Sup difference of one step against the brute-force coupled solve.
#[pyfunction]
fn oracle_difference(py: Python<'_>, config: &PyConfig) -> PyResult<f64> {
    let cfg = config.inner.clone();
    py.detach(|| {
        let cert = initial_certificate(&cfg)?;
        let cor = Arc::new(cfg.coriolis()?);
        let p = cfg.initial_field()?;
        oracle::compare(&p, cfg.dt, cfg.model, &cor, &cfg.step_params(cert.c0)).map(|c| c.sup())
    })
    .map_err(err)
}

/// `(dts, errors, ratios)` of a time-step halving study.
#[pyfunction]
fn convergence(py: Python<'_>, config: &PyConfig, halvings: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let cfg = config.inner.clone();
    let s = py.detach(|| self_convergence(&cfg, halvings)).map_err(err)?;
    Ok((s.dts, s.errors, s.ratios))
}

/// Growth factor of the separation of two nearby runs.
#[pyfunction]
fn stability_probe(py: Python<'_>, a: &PyConfig, b: &PyConfig) -> PyResult<f64> {
    let (a, b) = (a.inner.clone(), b.inner.clone());
    py.detach(|| diagnostics::stability_probe(&a, &b)).map_err(err)
}

/// `{name: (sup, mean)}` differences between two snapshot files.
#[pyfunction]
fn diff_snapshots<'py>(py: Python<'py>, a: PathBuf, b: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let sa = io::read_snapshot(&a).map_err(err)?;
    let sb = io::read_snapshot(&b).map_err(err)?;
    let d = PyDict::new(py);
    for (name, sup, mean) in io::diff(&sa, &sb).map_err(err)? {
        d.set_item(name, (sup, mean))?;
    }
    Ok(d)
}

/// Reads a snapshot file into a dict.
#[pyfunction]
fn read_snapshot<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let s = io::read_snapshot(&path).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("model", s.model.name())?;
    d.set_item("t", s.t)?;
    d.set_item("n", s.grid().n())?;
    for (name, values) in s.arrays() {
        d.set_item(name, values.to_vec())?;
    }
    d.set_item("monitors", s.monitors.to_array().to_vec())?;
    Ok(d)
}

#[pymodule(name = "sgtorus")]
fn sgtorus_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SgtError", m.py().get_type::<SgtError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(eulerian, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_difference, m)?)?;
    m.add_function(wrap_pyfunction!(convergence, m)?)?;
    m.add_function(wrap_pyfunction!(stability_probe, m)?)?;
    m.add_function(wrap_pyfunction!(diff_snapshots, m)?)?;
    m.add_function(wrap_pyfunction!(read_snapshot, m)?)?;
    Ok(())
}
