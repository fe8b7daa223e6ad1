//! Python bindings for the `fenec` classifiers.
//!
//! Matrices cross the boundary as lists of rows; structured values such as
//! hyperparameters and reports are plain dicts.

use fenec::clustering::KMeans;
use fenec::covariance::{invert_spd as invert, shrunk_correlation as correlation};
use fenec::feature_store::load_split_file;
use fenec::preprocessing::{sample_normalize as l2_rows, tukey_transform as tukey};
use fenec::protocol::evaluate;
use fenec::{
    build_task_stream, load_feature_file, write_feature_file, FeatureBatch, FenecError, FenecModel,
    HyperParams, LogitHead, RunReport, ShrinkageParams, TrainConfig,
};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(
    pyfenec,
    FenecException,
    PyException,
    "Raised for any library error."
);
create_exception!(
    pyfenec,
    ConditioningError,
    FenecException,
    "Raised when a covariance matrix is not positive definite."
);

fn err(e: FenecError) -> PyErr {
    match e {
        FenecError::Io { .. } => PyOSError::new_err(e.to_string()),
        FenecError::Conditioning { .. } => ConditioningError::new_err(e.to_string()),
        _ => FenecException::new_err(e.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let f = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != f) {
        return Err(FenecException::new_err(format!(
            "row {i} has {} values, expected {f}",
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), f, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

type KMeansOutput = (Vec<Vec<f64>>, Vec<usize>, Vec<f64>);

fn batch(rows: &[Vec<f64>], labels: Vec<u32>) -> PyResult<FeatureBatch> {
    FeatureBatch::new(to_matrix(rows)?, labels).map_err(err)
}

/// Converts a Python value to a Rust type through its JSON form.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| FenecException::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| FenecException::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Reads a FENC file into `(rows, labels)`.
#[pyfunction]
fn load_features(path: &str) -> PyResult<(Vec<Vec<f64>>, Vec<u32>)> {
    let b = load_feature_file(path).map_err(err)?;
    Ok((to_rows(b.features()), b.labels().to_vec()))
}

/// Writes rows and labels as a FENC file (features stored as f32).
#[pyfunction]
fn write_features(path: &str, rows: Vec<Vec<f64>>, labels: Vec<u32>) -> PyResult<()> {
    write_feature_file(path, &batch(&rows, labels)?).map_err(err)
}

#[pyfunction]
fn tukey_transform(rows: Vec<Vec<f64>>, lam: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&tukey(&to_matrix(&rows)?, lam).map_err(err)?))
}

#[pyfunction]
fn sample_normalize(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&l2_rows(&to_matrix(&rows)?).map_err(err)?))
}

/// Covariance of the rows, shrunk and scaled to a correlation matrix.
#[pyfunction]
#[pyo3(signature = (rows, gamma1, gamma2, repetitions = 1))]
fn shrunk_correlation(
    rows: Vec<Vec<f64>>,
    gamma1: f64,
    gamma2: f64,
    repetitions: u8,
) -> PyResult<Vec<Vec<f64>>> {
    let params = ShrinkageParams {
        gamma1,
        gamma2,
        repetitions,
    };
    Ok(to_rows(
        &correlation(&to_matrix(&rows)?, &params).map_err(err)?,
    ))
}

#[pyfunction]
fn invert_spd(matrix: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&invert(&to_matrix(&matrix)?).map_err(err)?))
}

/// Returns `(centroids, assignments, objective_history)`.
#[pyfunction]
#[pyo3(signature = (rows, k, seed = 0))]
fn kmeans(rows: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<KMeansOutput> {
    let fit = KMeans::new(k, seed).fit(&to_matrix(&rows)?).map_err(err)?;
    Ok((
        to_rows(&fit.centroids),
        fit.assignments,
        fit.objective_history,
    ))
}

fn train_config(
    hyper: &HyperParams,
    seed: u64,
    training: Option<&Bound<'_, PyAny>>,
) -> PyResult<Option<TrainConfig>> {
    let Some(lr) = hyper.learning_rate else {
        return Ok(None);
    };
    let mut cfg = TrainConfig::new(lr, seed);
    if let Some(t) = training {
        let knobs: serde_json::Map<String, serde_json::Value> = from_py(t)?;
        for (key, value) in knobs {
            let as_usize = || {
                value
                    .as_u64()
                    .map(|v| v as usize)
                    .ok_or_else(|| FenecException::new_err(format!("{key} must be an integer")))
            };
            match key.as_str() {
                "batch_size" => cfg.batch_size = as_usize()?,
                "max_epochs" => cfg.max_epochs = as_usize()?,
                "patience" => cfg.patience = as_usize()?,
                "validation_fraction" => {
                    cfg.validation_fraction = value.as_f64().ok_or_else(|| {
                        FenecException::new_err("validation_fraction must be a number")
                    })?
                }
                other => {
                    return Err(FenecException::new_err(format!(
                        "unknown training option {other:?}"
                    )))
                }
            }
        }
    }
    cfg.validate().map_err(err)?;
    Ok(Some(cfg))
}

/// Runs the class-incremental protocol on two FENC files and a task split.
#[pyfunction]
#[pyo3(signature = (train_path, test_path, split, hyper, seed = 0, training = None))]
fn run_protocol<'py>(
    py: Python<'py>,
    train_path: &str,
    test_path: &str,
    split: Vec<Vec<u32>>,
    hyper: &Bound<'py, PyAny>,
    seed: u64,
    training: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let hyper: HyperParams = from_py(hyper)?;
    let cfg = train_config(&hyper, seed, training)?;
    let train = load_feature_file(train_path).map_err(err)?;
    let test = load_feature_file(test_path).map_err(err)?;
    let report = py
        .detach(|| {
            let stream = build_task_stream(&train, &test, &split)?;
            fenec::run_protocol(&stream, &hyper, cfg.as_ref(), seed)
        })
        .map_err(err)?;
    to_py(py, &report)
}

/// Reads a task split file (a JSON list of class-id lists).
#[pyfunction]
fn load_split(path: &str) -> PyResult<Vec<Vec<u32>>> {
    load_split_file(path).map_err(err)
}

/// Mean, standard deviation and per-task confidence bands over report dicts.
#[pyfunction]
fn aggregate_runs<'py>(
    py: Python<'py>,
    reports: &Bound<'py, PyAny>,
) -> PyResult<Bound<'py, PyAny>> {
    let reports: Vec<RunReport> = from_py(reports)?;
    to_py(py, &fenec::aggregate_runs(&reports).map_err(err)?)
}

/// A FeNeC or FeNeC-Log model accumulating classes task by task.
#[pyclass(name = "Model", module = "pyfenec")]
struct PyModel {
    inner: FenecModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (hyper, seed = 0))]
    fn new(hyper: &Bound<'_, PyAny>, seed: u64) -> PyResult<Self> {
        let hyper: HyperParams = from_py(hyper)?;
        Ok(Self {
            inner: FenecModel::new(hyper, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: FenecModel::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: FenecModel::from_bytes(data).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    /// Fits every class in the batch; classes already stored are rejected.
    fn fit_task(&mut self, py: Python<'_>, rows: Vec<Vec<f64>>, labels: Vec<u32>) -> PyResult<()> {
        let b = batch(&rows, labels)?;
        let inner = &mut self.inner;
        py.detach(|| inner.fit_task(&b)).map_err(err)
    }

    /// Trains and freezes the FeNeC-Log head; returns the training history.
    #[pyo3(signature = (rows, labels, learning_rate = None, seed = None, training = None))]
    fn train_head<'py>(
        &mut self,
        py: Python<'py>,
        rows: Vec<Vec<f64>>,
        labels: Vec<u32>,
        learning_rate: Option<f64>,
        seed: Option<u64>,
        training: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut hyper = self.inner.hyper().clone();
        if learning_rate.is_some() {
            hyper.learning_rate = learning_rate;
        }
        let cfg = train_config(&hyper, seed.unwrap_or(self.inner.seed()), training)?
            .ok_or_else(|| FenecException::new_err("a learning rate is required"))?;
        let b = batch(&rows, labels)?;
        let inner = &mut self.inner;
        let history = py.detach(|| inner.train_head(&b, &cfg)).map_err(err)?;
        to_py(py, &history)
    }

    /// Predicted class ids under the model's decision rule.
    fn predict(&self, py: Python<'_>, rows: Vec<Vec<f64>>) -> PyResult<Vec<u32>> {
        let x = to_matrix(&rows)?;
        py.detach(|| self.inner.classify_batch(&x)).map_err(err)
    }

    /// FeNeC-Log class probabilities, columns ordered as `class_ids`.
    fn predict_proba(&self, py: Python<'_>, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(&rows)?;
        py.detach(|| self.inner.predict_proba_batch(&x))
            .map_err(err)
    }

    fn score(&self, py: Python<'_>, rows: Vec<Vec<f64>>, labels: Vec<u32>) -> PyResult<f64> {
        let b = batch(&rows, labels)?;
        py.detach(|| evaluate(&self.inner, &b)).map_err(err)
    }

    /// Installs a frozen head with the given scalars.
    fn set_head(&mut self, a: f64, b: f64) {
        let mut head = LogitHead::new(a, b);
        head.frozen = true;
        self.inner.set_head(head);
    }

    #[getter]
    fn head<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.head())
    }

    #[getter]
    fn hyper<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.hyper())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    #[getter]
    fn n_features(&self) -> Option<usize> {
        self.inner.n_features()
    }

    #[getter]
    fn class_ids(&self) -> Vec<u32> {
        self.inner.class_ids().collect()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Centroids of one class as rows.
    fn centroids(&self, class_id: u32) -> PyResult<Vec<Vec<f64>>> {
        let entry = self
            .inner
            .entry(class_id)
            .ok_or_else(|| FenecException::new_err(format!("class {class_id} is not stored")))?;
        Ok(to_rows(entry.centroids().centroids()))
    }

    /// Precision (inverse shrunk correlation) of one class.
    fn precision(&self, class_id: u32) -> PyResult<Vec<Vec<f64>>> {
        let entry = self
            .inner
            .entry(class_id)
            .ok_or_else(|| FenecException::new_err(format!("class {class_id} is not stored")))?;
        Ok(to_rows(entry.covariance().precision()))
    }

    fn __len__(&self) -> usize {
        self.inner.n_classes()
    }

    fn __repr__(&self) -> String {
        let h = self.inner.hyper();
        format!(
            "Model(method={:?}, n_clusters={}, classes={})",
            h.method,
            h.n_clusters,
            self.inner.n_classes()
        )
    }
}

#[pymodule]
fn pyfenec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FenecError", m.py().get_type::<FenecException>())?;
    m.add("ConditioningError", m.py().get_type::<ConditioningError>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(load_split, m)?)?;
    m.add_function(wrap_pyfunction!(tukey_transform, m)?)?;
    m.add_function(wrap_pyfunction!(sample_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(shrunk_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(invert_spd, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_runs, m)?)?;
    Ok(())
}
