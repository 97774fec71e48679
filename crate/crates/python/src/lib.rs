//! Python bindings for the `dpbrem` simulator.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use dpbrem::accountant::{self, PrivacyConfig};
use dpbrem::attacks;
use dpbrem::error::Error;
use dpbrem::harness::{self, ExperimentConfig, Grid, MetricsRow};
use dpbrem::protocol;
use dpbrem::rng::RngStream;
use dpbrem::secure_agg::{self as shamir, Share, SharingConfig};
use dpbrem::vector::{self, ParamVector};
use dpbrem::verify;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(m) => PyIOError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py_json<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rows_to_py<'py>(py: Python<'py>, rows: &[MetricsRow]) -> PyResult<Bound<'py, PyList>> {
    let out = PyList::empty(py);
    for r in rows {
        let d = PyDict::new(py);
        d.set_item("round", r.round)?;
        d.set_item("test_accuracy", r.test_accuracy)?;
        d.set_item("train_loss", r.train_loss)?;
        d.set_item("epsilon_spent", r.epsilon_spent)?;
        d.set_item("clip_fraction_record", r.clip_fraction_record)?;
        d.set_item("clip_fraction_client", r.clip_fraction_client)?;
        d.set_item("agg_error_sq", r.agg_error_sq)?;
        out.append(d)?;
    }
    Ok(out)
}

fn overrides_iter(overrides: Option<HashMap<String, String>>) -> Vec<(String, String)> {
    overrides
        .unwrap_or_default()
        .into_iter()
        .map(|(k, v)| {
            let key = if k.starts_with(harness::ENV_PREFIX) {
                k
            } else {
                format!("{}{}", harness::ENV_PREFIX, k.replace('.', "__").to_ascii_uppercase())
            };
            (key, v)
        })
        .collect()
}

/// A validated experiment configuration.
///
/// Overrides map dotted keys (`"rule.client_bound"`) or `DPBREM__` names to
/// TOML literals.
#[pyclass(module = "dpbrem", frozen)]
struct Experiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[staticmethod]
    #[pyo3(signature = (text, overrides=None))]
    fn from_toml(text: &str, overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_toml_str(text, overrides_iter(overrides)).map_err(py_err)?;
        Ok(Self { cfg })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides=None))]
    fn load(path: PathBuf, overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    /// A copy with further overrides applied.
    fn with_overrides(&self, overrides: HashMap<String, String>) -> PyResult<Self> {
        Self::from_toml(&self.to_toml()?, Some(overrides))
    }

    fn to_toml(&self) -> PyResult<String> {
        let table = self.cfg.to_table().map_err(py_err)?;
        toml::to_string(&table).map_err(value_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.cfg.rounds
    }

    #[getter]
    fn rule(&self) -> String {
        self.cfg.rule.kind.to_string()
    }

    /// Runs in memory and returns `{"rows": [...], "summary": {...}}`.
    fn simulate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let cfg = self.cfg.clone();
        let result = py.detach(move || harness::simulate(&cfg)).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("rows", rows_to_py(py, &result.rows)?)?;
        out.set_item("summary", to_py_json(py, &result.summary)?)?;
        out.set_item("transcript_entries", result.transcript.len())?;
        Ok(out)
    }

    /// Runs and writes output files; returns the summary and the file paths.
    fn run<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let cfg = self.cfg.clone();
        let (summary, files) = py.detach(move || harness::run_experiment(&cfg)).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("summary", to_py_json(py, &summary)?)?;
        out.set_item("metrics", files.metrics)?;
        out.set_item("summary_path", files.summary)?;
        out.set_item("transcript", files.transcript)?;
        Ok(out)
    }

    /// Runs a grid such as `"rule.client_bound=0.5,1;seed=1,2"`.
    #[pyo3(signature = (grid, max_points=harness::DEFAULT_MAX_POINTS))]
    fn sweep<'py>(&self, py: Python<'py>, grid: &str, max_points: usize) -> PyResult<Bound<'py, PyAny>> {
        let grid = Grid::parse(grid).map_err(py_err)?;
        let cfg = self.cfg.clone();
        let points = py.detach(move || harness::sweep(&cfg, &grid, max_points)).map_err(py_err)?;
        to_py_json(py, &points)
    }

    /// Per-client-size privacy table as a list of dicts.
    fn accountant<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let s = harness::setup(&self.cfg).map_err(py_err)?;
        let base = harness::accountant_config(&self.cfg, &s.calibration);
        let clients: Vec<(f64, usize)> = s.clients.iter().map(|c| (c.p, c.data.len())).collect();
        let out = PyList::empty(py);
        for ((p, n), r) in accountant::per_client_reports(&base, &clients).map_err(py_err)? {
            let d = to_py_json(py, &r)?;
            d.set_item("p", p)?;
            d.set_item("n_records", n)?;
            out.append(d)?;
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Experiment(rule={}, rounds={}, seed={})", self.cfg.rule.kind, self.cfg.rounds, self.cfg.seed)
    }
}

/// Record-level accountant for one client.
#[pyclass(module = "dpbrem", frozen)]
struct Accountant {
    cfg: PrivacyConfig,
}

#[pymethods]
impl Accountant {
    #[new]
    #[pyo3(signature = (rounds, p, n_records, sigma, record_bound, client_bound=f64::INFINITY, q=1.0, delta=1e-6))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        rounds: usize,
        p: f64,
        n_records: usize,
        sigma: f64,
        record_bound: f64,
        client_bound: f64,
        q: f64,
        delta: f64,
    ) -> PyResult<Self> {
        let cfg = PrivacyConfig { rounds, q, p, n_records, record_bound, client_bound, sigma, delta };
        cfg.validate().map_err(py_err)?;
        Ok(Self { cfg })
    }

    #[pyo3(signature = (rounds=None))]
    fn report<'py>(&self, py: Python<'py>, rounds: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let r = self.cfg.report_at(rounds.unwrap_or(self.cfg.rounds)).map_err(py_err)?;
        to_py_json(py, &r)
    }

    fn epsilon(&self) -> PyResult<f64> {
        Ok(self.cfg.report().map_err(py_err)?.epsilon)
    }
}

#[pyfunction]
fn clip(v: Vec<f64>, bound: f64) -> PyResult<Vec<f64>> {
    Ok(vector::clip(&ParamVector::new(v), bound).map_err(py_err)?.into_inner())
}

#[pyfunction]
#[pyo3(signature = (g, beta, prev=None))]
fn momentum_step(g: Vec<f64>, beta: f64, prev: Option<Vec<f64>>) -> Vec<f64> {
    let prev = prev.map(ParamVector::new);
    protocol::momentum_step(prev.as_ref(), &ParamVector::new(g), beta).into_inner()
}

/// Sum of `clip(m_i - center, C)` over `(client_id, m_i)` pairs, and the clipped fraction.
#[pyfunction]
fn centered_clip_sum(center: Vec<f64>, submissions: Vec<(usize, Vec<f64>)>, client_bound: f64) -> PyResult<(Vec<f64>, f64)> {
    let subs: Vec<(usize, ParamVector)> = submissions.into_iter().map(|(i, v)| (i, ParamVector::new(v))).collect();
    let (sum, diag) = protocol::centered_clip_sum(&ParamVector::new(center), &subs, client_bound).map_err(py_err)?;
    Ok((sum.into_inner(), diag.clip_fraction_client))
}

#[pyfunction]
fn sensitivity(record_bound: f64, client_bound: f64, p: f64, n_records: usize) -> PyResult<f64> {
    accountant::sensitivity(record_bound, client_bound, p, n_records).map_err(py_err)
}

#[pyfunction]
fn gdp_mu(rounds: usize, q: f64, p: f64, sigma_eff: f64) -> f64 {
    accountant::gdp_mu(rounds, q, p, sigma_eff)
}

#[pyfunction]
fn solve_epsilon(mu: f64, delta: f64) -> PyResult<f64> {
    accountant::solve_epsilon(mu, delta).map_err(py_err)
}

#[pyfunction]
fn calibrate_sigma_eff(target_epsilon: f64, delta: f64, rounds: usize, q: f64, p: f64) -> PyResult<f64> {
    accountant::calibrate_sigma_eff(target_epsilon, delta, rounds, q, p).map_err(py_err)
}

#[pyfunction]
fn alie_z(n: usize, b: usize) -> f64 {
    attacks::alie_z(n, b)
}

/// Shares `secret` as `(point, value)` pairs.
#[pyfunction]
#[pyo3(signature = (secret, n, t, modulus=(1u64 << 61) - 1, seed=0))]
fn shamir_share(secret: u64, n: usize, t: usize, modulus: u64, seed: u64) -> PyResult<Vec<(u32, u64)>> {
    let cfg = SharingConfig::new(n, t, modulus).map_err(value_err)?;
    let shares = shamir::share(secret, &cfg, &RngStream::from_seed(seed));
    Ok(shares.into_iter().map(|s| (s.point, s.value)).collect())
}

/// Reconstructs from `(point, value)` pairs; `robust` tolerates wrong shares.
#[pyfunction]
#[pyo3(signature = (shares, n, t, modulus=(1u64 << 61) - 1, robust=false))]
fn shamir_reconstruct(shares: Vec<(u32, u64)>, n: usize, t: usize, modulus: u64, robust: bool) -> PyResult<u64> {
    let cfg = SharingConfig::new(n, t, modulus).map_err(value_err)?;
    let shares: Vec<Share> = shares.into_iter().map(|(point, value)| Share { point, value }).collect();
    let r = if robust { shamir::robust_reconstruct(&shares, &cfg) } else { shamir::reconstruct(&shares, &cfg) };
    r.map_err(value_err)
}

/// Runs one verification suite and returns `(passed, report_text)`.
#[pyfunction]
fn verify_suite(py: Python<'_>, name: String) -> PyResult<(bool, String)> {
    let report = py.detach(move || verify::run_suite(&name)).map_err(py_err)?;
    Ok((report.passed(), report.to_string()))
}

#[pymodule]
#[pyo3(name = "dpbrem")]
fn dpbrem_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Experiment>()?;
    m.add_class::<Accountant>()?;
    m.add_function(wrap_pyfunction!(clip, m)?)?;
    m.add_function(wrap_pyfunction!(momentum_step, m)?)?;
    m.add_function(wrap_pyfunction!(centered_clip_sum, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(gdp_mu, m)?)?;
    m.add_function(wrap_pyfunction!(solve_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_sigma_eff, m)?)?;
    m.add_function(wrap_pyfunction!(alie_z, m)?)?;
    m.add_function(wrap_pyfunction!(shamir_share, m)?)?;
    m.add_function(wrap_pyfunction!(shamir_reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(verify_suite, m)?)?;
    m.add("SUITES", verify::SUITES.to_vec())?;
    m.add("ENV_PREFIX", harness::ENV_PREFIX)?;
    Ok(())
}
