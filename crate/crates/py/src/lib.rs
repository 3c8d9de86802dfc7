//! Python bindings: configuration, model construction, checkpoints,
//! parameter accounting and multi-seed experiments.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmrl_core::harness::{self, ExperimentConfig, MetricsReport, SplitSpec};
use mmrl_core::trainer::{self, ModelState};
use mmrl_core::MmrlError;

fn py_err(e: MmrlError) -> PyErr {
    match e {
        MmrlError::Io(io) => PyIOError::new_err(io.to_string()),
        MmrlError::UnknownKey(k) => PyKeyError::new_err(k),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Parsed experiment configuration.
#[pyclass(name = "Config", module = "mmrl")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Desk defaults, optionally overridden by `key = value` text.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        harness::parse_config(text).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        harness::load_config(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.encoder.variant.name()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn ablations(&self) -> Vec<&'static str> {
        self.inner.ablations.active_names()
    }

    fn __repr__(&self) -> String {
        format!("Config(variant={:?}, seeds={:?})", self.variant(), self.inner.seeds)
    }
}

/// Frozen backbone plus adaptation parameters.
#[pyclass(name = "Model", module = "mmrl")]
struct PyModel {
    inner: ModelState<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 1))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        let c = &config.inner;
        trainer::build_model(&c.encoder, c.ablations, seed, c.backbone_seed)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        harness::load_checkpoint(&path)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        harness::save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    fn trainable_names(&self) -> Vec<String> {
        self.inner.params.trainable_names()
    }

    fn num_trainable(&self) -> usize {
        self.inner
            .params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 hex digest of every frozen tensor.
    fn frozen_hash(&self) -> String {
        trainer::frozen_hash(&self.inner.params)
    }

    /// Base/novel accuracy on the task described by `config`.
    fn evaluate<'py>(&self, py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
        let c = &config.inner;
        let e = py
            .detach(|| {
                let task = harness::generate_synthetic_task(&c.task, &self.inner.config)?;
                let split = SplitSpec::equal_halves(c.task.classes)?;
                let w = &c.train.weights;
                harness::evaluate_split(&self.inner, &task, &split, w.alpha, w.tau, c.mixing)
            })
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("base", e.base_accuracy)?;
        d.set_item("novel", e.novel_accuracy)?;
        d.set_item("hm", e.hm)?;
        Ok(d)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let rows: Vec<(u64, f64, f64, f64)> = r.per_seed.iter().map(|m| (m.seed, m.base, m.novel, m.hm)).collect();
    d.set_item("per_seed", rows)?;
    d.set_item("failures", r.failures.clone())?;
    for (key, s) in [("base", r.base), ("novel", r.novel), ("hm", r.hm)] {
        d.set_item(key, (s.mean, s.std))?;
    }
    Ok(d)
}

/// Trains and evaluates every configured seed; writes artifacts when `out_dir` is set.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn run_experiment<'py>(py: Python<'py>, config: &PyConfig, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let outcome = py
        .detach(|| harness::run_experiment(&config.inner, out_dir.as_deref()))
        .map_err(py_err)?;
    report_dict(py, &outcome.report)
}

/// `(total, [(group, count)])` for the configured variant and ablations.
#[pyfunction]
fn count_trainable_parameters(config: &PyConfig) -> (usize, Vec<(&'static str, usize)>) {
    let c = harness::count_trainable_parameters(&config.inner.encoder, &config.inner.ablations);
    (c.total, c.groups)
}

#[pyfunction]
fn harmonic_mean(base: f64, novel: f64) -> f64 {
    harness::harmonic_mean(base, novel)
}

#[pymodule]
fn mmrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(count_trainable_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add("FORMAT_VERSION", harness::FORMAT_VERSION)?;
    Ok(())
}
