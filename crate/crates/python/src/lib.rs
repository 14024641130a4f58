//! Python bindings: the expanding model, the loss functions, herding,
//! accuracy metrics and the experiment runner.

use std::collections::HashMap;
use std::path::PathBuf;

use iclkit::experiment::{self, ExperimentConfig};
use iclkit::losses::{self, ClassCounts};
use iclkit::metrics::AccuracyMatrix;
use iclkit::model::{BackboneSpec, ExpandingModel, Phase};
use ndarray::{Array1, Array2};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(iclkit, IclkitError, PyException);

fn py_err(e: iclkit::Error) -> PyErr {
    IclkitError::new_err(format!("[{}] {e}", e.kind()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(IclkitError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| IclkitError::new_err(e.to_string()))
}

fn rows(a: Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Backbone, branches and cosine classifier that grow with each step.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ExpandingModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dim, classes, hidden = vec![64, 64], feature_dim = 16, split_at = 1, seed = 0))]
    fn new(
        input_dim: usize,
        classes: Vec<usize>,
        hidden: Vec<usize>,
        feature_dim: usize,
        split_at: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = BackboneSpec {
            input_dim,
            hidden,
            feature_dim,
            split_at,
            ..BackboneSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = ExpandingModel::new(spec, &classes, &mut rng).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    /// Adds a branch and classifier rows for `classes`.
    #[pyo3(signature = (classes, seed = 0))]
    fn expand(&mut self, classes: Vec<usize>, seed: u64) -> PyResult<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.inner.expand(&classes, &mut rng).map_err(py_err)
    }

    /// Adds classifier rows without a new branch.
    #[pyo3(signature = (classes, seed = 0))]
    fn extend_classes(&mut self, classes: Vec<usize>, seed: u64) -> PyResult<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.inner
            .extend_classes(&classes, &mut rng)
            .map_err(py_err)
    }

    fn set_phase(&mut self, phase: &str) -> PyResult<()> {
        let p: Phase = phase.parse().map_err(py_err)?;
        self.inner.set_phase(p).map_err(py_err)
    }

    #[getter]
    fn phase(&self) -> String {
        self.inner.phase().to_string()
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step()
    }

    #[getter]
    fn classes(&self) -> Vec<usize> {
        self.inner.classes()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.inner.classifier().temperature()
    }

    /// `(rows, cols)` of the unified classifier.
    #[getter]
    fn classifier_shape(&self) -> (usize, usize) {
        let c = self.inner.classifier();
        (c.rows(), c.cols())
    }

    fn features(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x)?;
        self.inner
            .forward_features(x.view())
            .map(rows)
            .map_err(py_err)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = matrix(x)?;
        self.inner.predict(x.view()).map_err(py_err)
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x)?;
        self.inner.predict_proba(x.view()).map(rows).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        iclkit::checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = iclkit::checkpoint::load(&path).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.classifier_shape();
        format!(
            "Model(step={}, classifier={r}x{c}, phase={})",
            self.step(),
            self.phase()
        )
    }
}

/// Herding order of up to `budget` rows of `features`.
#[pyfunction]
fn herding_select(features: Vec<Vec<f64>>, budget: usize) -> PyResult<Vec<usize>> {
    let f = matrix(features)?;
    iclkit::memory::herding_select(f.view(), budget).map_err(py_err)
}

#[pyfunction]
fn class_balanced_focal(
    p_true: Vec<f64>,
    labels: Vec<usize>,
    counts: HashMap<usize, usize>,
    beta: f64,
    gamma: f64,
) -> PyResult<f64> {
    let counts: ClassCounts = counts.into_iter().collect();
    losses::class_balanced_focal(&p_true, &labels, &counts, beta, gamma).map_err(py_err)
}

#[pyfunction]
fn distillation_loss(
    old_probs: Vec<Vec<f64>>,
    new_probs: Vec<Vec<f64>>,
    n_old: usize,
) -> PyResult<f64> {
    let (a, b) = (matrix(old_probs)?, matrix(new_probs)?);
    losses::distillation_loss(a.view(), b.view(), n_old).map_err(py_err)
}

#[pyfunction]
fn margin_loss(
    sims: Vec<f64>,
    true_class: usize,
    new_classes: Vec<usize>,
    m: f64,
    k: usize,
) -> PyResult<f64> {
    let s = Array1::from(sims);
    losses::margin_loss(s.view(), true_class, &new_classes, m, k).map_err(py_err)
}

/// Acc, Fgt, Acc_new and Acc_old of a lower-triangular accuracy matrix
/// given as rows (group i, step t).
#[pyfunction]
fn accuracy_metrics(rows: Vec<Vec<f64>>) -> PyResult<HashMap<String, f64>> {
    let m = AccuracyMatrix::from_rows(&rows)
        .and_then(|m| m.metrics())
        .map_err(py_err)?;
    Ok(HashMap::from([
        ("acc".into(), m.acc),
        ("fgt".into(), m.fgt),
        ("acc_new".into(), m.acc_new),
        ("acc_old".into(), m.acc_old),
    ]))
}

/// Commented configuration with every default.
#[pyfunction]
fn default_config() -> &'static str {
    experiment::TEMPLATE
}

/// Runs an experiment from TOML text. Returns `(mean, std)` per metric.
#[pyfunction]
#[pyo3(signature = (config, out = None))]
fn run_experiment(config: &str, out: Option<PathBuf>) -> PyResult<HashMap<String, (f64, f64)>> {
    let mut cfg = ExperimentConfig::from_toml(config).map_err(py_err)?;
    if let Some(out) = out {
        cfg.out = out;
    }
    let s = experiment::run(&cfg).map_err(py_err)?;
    Ok([
        ("acc", s.acc),
        ("fgt", s.fgt),
        ("acc_new", s.acc_new),
        ("acc_old", s.acc_old),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), (v.mean, v.std)))
    .collect())
}

#[pymodule(name = "iclkit")]
fn iclkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IclkitError", m.py().get_type::<IclkitError>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(herding_select, m)?)?;
    m.add_function(wrap_pyfunction!(class_balanced_focal, m)?)?;
    m.add_function(wrap_pyfunction!(distillation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
