//! Python bindings: run experiments, read checkpoints, and call the
//! transport and kernel primitives on plain nested lists.

use std::path::PathBuf;

use ocmlab::harness::{self, presets, ExperimentConfig, Learner};
use ocmlab::memory::similarity_matrix;
use ocmlab::numerics::DenseMatrix;
use ocmlab::ot::EmpiricalDistribution;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(ocmlab_py, OcmlabError, PyException);
create_exception!(ocmlab_py, ConfigError, OcmlabError);
create_exception!(ocmlab_py, IntegrityError, OcmlabError);

fn to_py(e: ocmlab::Error) -> PyErr {
    match e.exit_code() {
        1 => ConfigError::new_err(e.to_string()),
        3 => IntegrityError::new_err(e.to_string()),
        _ => OcmlabError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(to_py)
}

fn nested(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

/// Squared 2-Wasserstein distance between two uniform point sets.
#[pyfunction]
fn exact_w2(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let p = EmpiricalDistribution::new(matrix(a)?).map_err(to_py)?;
    let q = EmpiricalDistribution::new(matrix(b)?).map_err(to_py)?;
    ocmlab::ot::exact_w2(&p, &q).map_err(to_py)
}

/// Kernel similarity matrix `exp(-‖a - b‖² / (2·alpha²))` between two feature sets.
#[pyfunction]
fn similarity(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    let s = similarity_matrix(&matrix(a)?, &matrix(b)?, alpha).map_err(to_py)?;
    Ok(nested(&s.values))
}

#[pyfunction]
fn preset_names() -> Vec<String> {
    presets::NAMES.iter().map(|s| s.to_string()).collect()
}

/// TOML text of a named preset, for editing and passing to `run_config`.
#[pyfunction]
#[pyo3(signature = (name, seed = 0))]
fn preset_toml(name: &str, seed: u64) -> PyResult<String> {
    let c = presets::by_name(name, seed)
        .ok_or_else(|| ConfigError::new_err(format!("unknown preset {name:?}")))?;
    c.to_toml().map_err(to_py)
}

/// Outcome of a run: metric records as NDJSON plus the final checkpoint.
#[pyclass(frozen)]
struct RunResult {
    #[pyo3(get)]
    metrics_ndjson: String,
    #[pyo3(get)]
    summary_csv: String,
    #[pyo3(get)]
    checkpoint: Py<Checkpoint>,
}

/// Runs an experiment from TOML text. Files are written only when the
/// config (or `output_dir`) names a directory.
#[pyfunction]
#[pyo3(signature = (toml, output_dir = None))]
fn run_config(py: Python<'_>, toml: &str, output_dir: Option<PathBuf>) -> PyResult<RunResult> {
    let mut cfg = ExperimentConfig::from_toml(toml).map_err(to_py)?;
    if output_dir.is_some() {
        cfg.output_dir = output_dir;
    }
    let out = py.detach(|| harness::run_experiment(&cfg)).map_err(to_py)?;
    Ok(RunResult {
        metrics_ndjson: harness::to_ndjson(&out.records).map_err(to_py)?,
        summary_csv: harness::summary_csv(&out.records),
        checkpoint: Py::new(
            py,
            Checkpoint {
                inner: out.checkpoint,
            },
        )?,
    })
}

#[pyclass(frozen)]
struct Checkpoint {
    inner: harness::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: harness::Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: harness::Checkpoint::from_bytes(data).map_err(to_py)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let b = self.inner.to_bytes().map_err(to_py)?;
        Ok(PyBytes::new(py, &b))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.config.name.clone()
    }

    #[getter]
    fn learner(&self) -> &'static str {
        match self.inner.learner {
            Learner::Single(_) => "single",
            Learner::Mixture(_) => "mixture",
            Learner::Classifier(_) => "classifier",
        }
    }

    #[getter]
    fn components(&self) -> usize {
        self.inner.learner.component_count()
    }

    #[getter]
    fn digests(&self) -> Vec<String> {
        self.inner.learner.digests()
    }

    #[getter]
    fn samples_seen(&self) -> u64 {
        self.inner.samples_seen
    }

    #[getter]
    fn stm_size(&self) -> usize {
        self.inner.memory.short_term_len()
    }

    /// Long-term memory contents, one row per sample.
    fn long_term(&self) -> Vec<Vec<f64>> {
        nested(&self.inner.memory.long_term().samples())
    }

    /// Learner features (latent means, or hidden activations for a classifier).
    fn features(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = self.inner.learner.features(&matrix(x)?).map_err(to_py)?;
        Ok(nested(&f))
    }

    /// Mean importance-weighted log-likelihood estimate with `m` samples.
    #[pyo3(signature = (x, m = 1000, seed = 0))]
    fn log_likelihood(
        &self,
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        m: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let x = matrix(x)?;
        py.detach(|| harness::evaluate_nll(&self.inner.learner, &x, m, seed))
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(name={:?}, learner={}, components={}, samples_seen={})",
            self.inner.config.name,
            self.learner(),
            self.components(),
            self.inner.samples_seen
        )
    }
}

#[pymodule]
fn ocmlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(exact_w2, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(preset_toml, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<RunResult>()?;
    m.add("OcmlabError", m.py().get_type::<OcmlabError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("IntegrityError", m.py().get_type::<IntegrityError>())?;
    Ok(())
}
