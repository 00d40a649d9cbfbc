//! Python bindings: synthetic streams, training, the model bank and the
//! KDE primitives. Matrices cross the boundary as lists of rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use gkde_core::analysis::{density_by_name, monte_carlo_bias_variance};
use gkde_core::bank;
use gkde_core::kde::{log_pdf_density, pdf_density, DEFAULT_CLIP};
use gkde_core::pdf::{self, ClassPdf};
use gkde_core::stream::{self, BlobConfig, CsvOptions, TaskPartition, TaskStream};
use gkde_core::tensor::Tensor;
use gkde_core::train::{train_stream, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: gkde_core::Error) -> PyErr {
    match e {
        gkde_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::matrix(rows.len(), cols, rows.concat()).map_err(err)
}

/// A sequence of tasks with disjoint label sets.
#[pyclass(module = "gkde", frozen)]
struct Stream(TaskStream);

#[pymethods]
impl Stream {
    #[staticmethod]
    #[pyo3(signature = (tasks, classes_per_task, dim, separation, seed=0, samples_per_class=100, center_spread=4.0))]
    fn blobs(
        tasks: usize,
        classes_per_task: usize,
        dim: usize,
        separation: f64,
        seed: u64,
        samples_per_class: usize,
        center_spread: f64,
    ) -> PyResult<Self> {
        let cfg = BlobConfig {
            samples_per_class,
            center_spread,
            ..BlobConfig::new(tasks, classes_per_task, dim, separation, seed)
        };
        stream::synth_blobs(&cfg).map(Self).map_err(err)
    }

    /// Reads a labelled CSV (header row, `label` column) and splits it by `partition`.
    #[staticmethod]
    #[pyo3(signature = (path, partition, seed=0))]
    fn from_csv(path: PathBuf, partition: Vec<Vec<u32>>, seed: u64) -> PyResult<Self> {
        let part = TaskPartition { tasks: partition };
        stream::ingest_csv(path, &CsvOptions::default(), &part, seed).map(Self).map_err(err)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        stream::write_csv(&self.0, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn partition(&self) -> Vec<Vec<u32>> {
        self.0.partition().tasks
    }

    /// `(features, labels)` of the held-out split of task index `j`.
    fn test_set(&self, j: usize) -> PyResult<(Vec<Vec<f64>>, Vec<u32>)> {
        let task = self.0.tasks().get(j).ok_or_else(|| PyValueError::new_err("task index out of range"))?;
        let s = task.test();
        Ok(((0..s.len()).map(|i| s.row(i).to_vec()).collect(), s.labels().to_vec()))
    }
}

#[pyclass(module = "gkde", frozen, get_all)]
struct Prediction {
    task_id: u32,
    class_label: u32,
    tp_score: f64,
    tp_probability: f64,
    wp_posterior: f64,
    combined_log_prob: f64,
}

#[pymethods]
impl Prediction {
    #[getter]
    fn combined_probability(&self) -> f64 {
        self.combined_log_prob.exp()
    }

    fn __repr__(&self) -> String {
        format!(
            "Prediction(task_id={}, class_label={}, tp_probability={}, wp_posterior={})",
            self.task_id, self.class_label, self.tp_probability, self.wp_posterior
        )
    }
}

impl From<bank::Prediction> for Prediction {
    fn from(p: bank::Prediction) -> Self {
        Self {
            task_id: p.task_id,
            class_label: p.class_label,
            tp_score: p.tp_score,
            tp_probability: p.tp_probability,
            wp_posterior: p.wp_posterior,
            combined_log_prob: p.combined_log_prob,
        }
    }
}

/// One frozen network plus class densities per task.
#[pyclass(module = "gkde", frozen)]
struct ModelBank(bank::ModelBank);

#[pymethods]
impl ModelBank {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        bank::ModelBank::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn task_ids(&self) -> Vec<u32> {
        self.0.entries().iter().map(|e| e.task_id()).collect()
    }

    fn labels(&self, task_id: u32) -> PyResult<Vec<u32>> {
        let entry = self.0.entry(task_id).ok_or_else(|| PyValueError::new_err(format!("no task {task_id}")))?;
        Ok(entry.labels())
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<Prediction> {
        self.0.predict(&x).map(Into::into).map_err(err)
    }

    fn predict_batch(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Prediction>> {
        let x = matrix(&rows)?;
        Ok(self.0.predict_batch(&x).map_err(err)?.into_iter().map(Into::into).collect())
    }
}

#[pyclass(module = "gkde", frozen, get_all)]
struct TrainResult {
    bank: Py<ModelBank>,
    average_accuracy: f64,
    /// `None` for single-task streams.
    average_forgetting: Option<f64>,
    accuracy_matrix: Vec<Vec<f64>>,
    /// `(task_id, tp_acc, wp_acc, overall_acc)` after each task.
    stages: Vec<(u32, f64, f64, f64)>,
}

/// Trains a fresh bank on `stream`. Keyword arguments override fields of
/// the training config (for example `embed_dim=8, bandwidth=0.5`).
#[pyfunction]
#[pyo3(signature = (stream, **overrides))]
fn train(py: Python<'_>, stream: &Stream, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<TrainResult> {
    let config: TrainConfig = match overrides {
        Some(kw) if !kw.is_empty() => {
            let json: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
            serde_json::from_str(&json).map_err(|e| PyValueError::new_err(format!("invalid training config: {e}")))?
        }
        _ => TrainConfig::default(),
    };
    let report = py.detach(|| train_stream(&stream.0, &config)).map_err(err)?;
    Ok(TrainResult {
        average_accuracy: report.average_accuracy().map_err(err)?,
        average_forgetting: report.average_forgetting().ok(),
        accuracy_matrix: report.matrix.rows().to_vec(),
        stages: report.stages.iter().map(|s| (s.task_id, s.tp_acc, s.wp_acc, s.overall_acc)).collect(),
        bank: Py::new(py, ModelBank(report.bank))?,
    })
}

/// Gaussian KDE with scalar bandwidth `h` over `anchors`, evaluated at `z`.
#[pyfunction]
fn kde_density(anchors: Vec<Vec<f64>>, z: Vec<f64>, h: f64) -> PyResult<f64> {
    let pdf = ClassPdf::from_anchors(0, matrix(&anchors)?, h, 1.0).map_err(err)?;
    pdf_density(&pdf, &z).map_err(err)
}

/// Log of `kde_density` with per-kernel log values clipped below at `clip`.
#[pyfunction]
#[pyo3(signature = (anchors, z, h, clip=DEFAULT_CLIP))]
fn log_kde_density(anchors: Vec<Vec<f64>>, z: Vec<f64>, h: f64, clip: f64) -> PyResult<f64> {
    let pdf = ClassPdf::from_anchors(0, matrix(&anchors)?, h, 1.0).map_err(err)?;
    log_pdf_density(&pdf, &z, clip).map_err(err)
}

/// Relative label frequencies as `{label: prior}`.
#[pyfunction]
fn estimate_priors(labels: Vec<u32>) -> PyResult<BTreeMap<u32, f64>> {
    let table = pdf::estimate_priors(&labels).map_err(err)?;
    Ok(table.entries().iter().map(|e| (e.label, e.prior)).collect())
}

/// Monte-Carlo bias and variance of the KDE against the leading-order
/// predictions. Returns a dict.
#[pyfunction]
#[pyo3(signature = (z, h, n, replications=2000, seed=0, density="normal1d"))]
fn bias_variance<'py>(
    py: Python<'py>,
    z: Vec<f64>,
    h: f64,
    n: usize,
    replications: usize,
    seed: u64,
    density: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let d = density_by_name(density).map_err(err)?;
    let r = py
        .detach(|| monte_carlo_bias_variance(d.as_ref(), &z, h, n, replications, seed))
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("true_density", r.true_density)?;
    out.set_item("predicted_bias", r.predicted_bias)?;
    out.set_item("measured_bias", r.measured_bias)?;
    out.set_item("se_bias", r.se_bias)?;
    out.set_item("predicted_variance", r.predicted_variance)?;
    out.set_item("measured_variance", r.measured_variance)?;
    out.set_item("se_variance", r.se_variance)?;
    out.set_item("regime_ok", r.regime_ok)?;
    Ok(out)
}

#[pymodule]
pub fn gkde(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Stream>()?;
    m.add_class::<ModelBank>()?;
    m.add_class::<Prediction>()?;
    m.add_class::<TrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(kde_density, m)?)?;
    m.add_function(wrap_pyfunction!(log_kde_density, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_priors, m)?)?;
    m.add_function(wrap_pyfunction!(bias_variance, m)?)?;
    Ok(())
}
