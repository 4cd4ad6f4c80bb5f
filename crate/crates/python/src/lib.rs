//! Python bindings: evidence computations, head losses, synthetic data and
//! full training runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ubpa::config::RunConfig;
use ubpa::evidence::{self, ConfusionMatrix};
use ubpa::gradcheck::run_suite;
use ubpa::heads::{self, HeadKind};
use ubpa::trainer::{self, RunState, TrainError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::Config(_) | TrainError::Invalid(_) => value_err(e),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Class masses of one classifier and their Euclidean norm.
#[pyclass(name = "Bpa", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyBpa {
    masses: Vec<f64>,
    gamma: f64,
    degenerate: bool,
}

#[pymethods]
impl PyBpa {
    fn __repr__(&self) -> String {
        format!(
            "Bpa(masses={:?}, gamma={}, degenerate={})",
            self.masses, self.gamma, self.degenerate
        )
    }
}

impl From<evidence::Bpa> for PyBpa {
    fn from(b: evidence::Bpa) -> Self {
        Self {
            masses: b.masses,
            gamma: b.gamma,
            degenerate: b.degenerate,
        }
    }
}

fn rows(cm: &ConfusionMatrix) -> Vec<Vec<u64>> {
    (0..cm.classes()).map(|i| cm.row(i).to_vec()).collect()
}

/// Confusion matrix (rows = true class) of `predictions` against `labels`.
#[pyfunction]
fn confusion_matrix(predictions: Vec<usize>, labels: Vec<usize>, classes: usize) -> PyResult<Vec<Vec<u64>>> {
    let cm = evidence::confusion_matrix(&predictions, &labels, classes).map_err(value_err)?;
    Ok(rows(&cm))
}

/// Masses and Γ of a square confusion matrix given as a list of rows.
#[pyfunction]
fn bpa(confusion: Vec<Vec<u64>>) -> PyResult<PyBpa> {
    let cm = ConfusionMatrix::from_rows(&confusion).map_err(value_err)?;
    Ok(evidence::bpa_from_confusion(&cm).into())
}

#[pyfunction]
fn gamma(masses: Vec<f64>) -> PyResult<f64> {
    evidence::gamma(&masses).map_err(value_err)
}

/// Cross-entropy of one sample and its gradient with respect to the scores.
#[pyfunction]
fn softmax_loss(scores: Vec<f64>, label: usize) -> PyResult<(f64, Vec<f64>)> {
    heads::softmax_loss(&scores, label).map_err(value_err)
}

/// Gaussian blobs: `(train_x, train_y, test_x, test_y)`.
#[pyfunction]
#[pyo3(signature = (seed, classes=3, per_class=300, dim=2, separation=6.0))]
#[allow(clippy::type_complexity)]
fn synth_blobs(
    seed: u64,
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>)> {
    let (train, test) = ubpa::data::synth_blobs(seed, classes, per_class, dim, separation).map_err(value_err)?;
    let x = |ds: &ubpa::Dataset| (0..ds.len()).map(|i| ds.features.row(i).to_vec()).collect();
    Ok((x(&train), train.labels.clone(), x(&test), test.labels.clone()))
}

/// Largest relative error of the finite-difference suite for one head.
#[pyfunction]
#[pyo3(signature = (head, seed=0))]
fn gradcheck(head: &str, seed: u64) -> PyResult<f64> {
    let kind = HeadKind::parse(head).ok_or_else(|| value_err(format!("unknown head `{head}`")))?;
    let reports = run_suite(kind, seed).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max))
}

/// A trained run: trunks, heads and their current evidence.
#[pyclass(name = "Model")]
struct PyModel {
    state: RunState,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Trains from a JSON config string. `data_dir` is needed for MNIST and
    /// CIFAR-10; `out_dir` additionally writes metrics and checkpoints.
    #[staticmethod]
    #[pyo3(signature = (config_json, data_dir=None, out_dir=None))]
    fn fit(config_json: &str, data_dir: Option<PathBuf>, out_dir: Option<PathBuf>) -> PyResult<Self> {
        let config = RunConfig::from_json(config_json).map_err(value_err)?;
        config.validate().map_err(value_err)?;
        let (train, test) = config.load_data(data_dir.as_deref()).map_err(value_err)?;
        let (state, _) = trainer::fit(&config, &train, &test, out_dir.as_deref()).map_err(train_err)?;
        Ok(Self { state, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (state, config) = RunState::load_checkpoint(&path).map_err(train_err)?;
        Ok(Self { state, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state.save_checkpoint(&self.config, &path).map_err(train_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn objectives(&self) -> Vec<String> {
        self.state.objectives.iter().map(|o| o.kind.to_string()).collect()
    }

    /// Γ currently applied to each objective.
    fn gammas(&self) -> Vec<f64> {
        self.state.gammas()
    }

    fn bpas(&self) -> Vec<PyBpa> {
        self.state.objectives.iter().map(|o| o.bpa.clone().into()).collect()
    }

    fn metrics_csv(&self) -> String {
        trainer::metrics_csv(&self.state.metrics)
    }

    /// Test error in percent per objective, then the combined prediction.
    #[pyo3(signature = (data_dir=None))]
    fn test_error(&self, data_dir: Option<PathBuf>) -> PyResult<Vec<(String, f64)>> {
        let (_, test) = self.config.load_data(data_dir.as_deref()).map_err(value_err)?;
        let ev = self.state.evaluate(&test).map_err(train_err)?;
        let mut out: Vec<(String, f64)> = self
            .state
            .objectives
            .iter()
            .zip(&ev.per_objective)
            .map(|(o, cm)| (o.kind.to_string(), cm.error_pct()))
            .collect();
        out.push(("combined".into(), ev.combined.error_pct()));
        Ok(out)
    }

    /// Combined class prediction for one flattened sample.
    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.state.predict_combined(&x).map_err(train_err)
    }
}

#[pymodule]
fn pyubpa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBpa>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(bpa, m)?)?;
    m.add_function(wrap_pyfunction!(gamma, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
