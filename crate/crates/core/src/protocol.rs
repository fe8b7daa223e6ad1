//! Class-incremental evaluation: fit tasks in order, score the cumulative
//! test set after each one, and summarize runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FenecError, Result};
use crate::feature_store::{FeatureBatch, TaskStream};
use crate::fenec::FenecModel;
use crate::fenec_log::{TrainConfig, TrainingHistory};
use crate::params::{HyperParams, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub per_task_accuracy: Vec<f64>,
    pub average_incremental_accuracy: f64,
    pub last_task_accuracy: f64,
    pub config_fingerprint: String,
}

impl RunReport {
    pub fn from_accuracies(
        per_task_accuracy: Vec<f64>,
        config_fingerprint: String,
    ) -> Result<Self> {
        let last = *per_task_accuracy
            .last()
            .ok_or_else(|| FenecError::Data("a run needs at least one task".into()))?;
        let mean = per_task_accuracy.iter().sum::<f64>() / per_task_accuracy.len() as f64;
        Ok(Self {
            per_task_accuracy,
            average_incremental_accuracy: mean,
            last_task_accuracy: last,
            config_fingerprint,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.per_task_accuracy.len()
    }
}

/// Fraction of predictions equal to the labels; every sample weighs the same.
pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(FenecError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(FenecError::Data("cannot score an empty test set".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy of the model's configured decision rule on a labelled batch.
pub fn evaluate(model: &FenecModel, batch: &FeatureBatch) -> Result<f64> {
    accuracy(&model.classify_batch(batch.features())?, batch.labels())
}

/// SHA-256 over the canonical JSON of the hyperparameters, training
/// configuration and seed.
pub fn config_fingerprint(hyper: &HyperParams, train: Option<&TrainConfig>, seed: u64) -> String {
    let canonical = serde_json::json!({
        "hyper": hyper,
        "train": train,
        "seed": seed,
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(digest)
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub report: RunReport,
    pub model: FenecModel,
    pub training: Option<TrainingHistory>,
}

/// Fits `model` on one task and, for FeNeC-Log on the first task, trains
/// and freezes the head.
pub fn fit_task_step(
    model: &mut FenecModel,
    train: &FeatureBatch,
    train_cfg: Option<&TrainConfig>,
) -> Result<Option<TrainingHistory>> {
    model.fit_task(train)?;
    if model.hyper().method == Method::FenecLog && model.head().is_none() {
        let cfg = train_cfg.ok_or_else(|| {
            FenecError::Config("fenec_log requires a training configuration".into())
        })?;
        return model.train_head(train, cfg).map(Some);
    }
    Ok(None)
}

pub fn run_protocol_detailed(
    stream: &TaskStream,
    hyper: &HyperParams,
    train_cfg: Option<&TrainConfig>,
    seed: u64,
) -> Result<ProtocolRun> {
    hyper.validate()?;
    if hyper.method == Method::FenecLog && train_cfg.is_none() {
        return Err(FenecError::Config(
            "fenec_log requires a training configuration".into(),
        ));
    }
    let mut model = FenecModel::new(hyper.clone(), seed)?;
    let mut training = None;
    let mut per_task = Vec::with_capacity(stream.len());
    for (t, task) in stream.tasks().iter().enumerate() {
        if let Some(history) = fit_task_step(&mut model, task.train(), train_cfg)? {
            training = Some(history);
        }
        let acc = evaluate(&model, &task.test())?;
        log::info!(
            "task {}/{}: {} classes seen, accuracy {:.4} on {} test samples",
            t + 1,
            stream.len(),
            model.n_classes(),
            acc,
            task.n_test()
        );
        per_task.push(acc);
    }
    let report = RunReport::from_accuracies(per_task, config_fingerprint(hyper, train_cfg, seed))?;
    Ok(ProtocolRun {
        report,
        model,
        training,
    })
}

pub fn run_protocol(
    stream: &TaskStream,
    hyper: &HyperParams,
    train_cfg: Option<&TrainConfig>,
    seed: u64,
) -> Result<RunReport> {
    run_protocol_detailed(stream, hyper, train_cfg, seed).map(|r| r.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; reported as 0 for a single run.
    pub sd: f64,
    pub sd_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub task_index: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_runs: usize,
    pub average_incremental_accuracy: MetricSummary,
    pub last_task_accuracy: MetricSummary,
    pub per_task: Vec<CurvePoint>,
}

impl RunSummary {
    /// One row per task: `task_index,mean,ci_low,ci_high`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("task_index,mean,ci_low,ci_high\n");
        for p in &self.per_task {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.task_index, p.mean, p.ci_low, p.ci_high
            ));
        }
        out
    }
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return MetricSummary {
            mean,
            sd: 0.0,
            sd_defined: false,
        };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    MetricSummary {
        mean,
        sd: var.sqrt(),
        sd_defined: true,
    }
}

/// Mean and sample standard deviation of each metric, plus per-task means
/// with 95% normal confidence bands (`mean ± 1.96·sd/√n`).
pub fn aggregate_runs(reports: &[RunReport]) -> Result<RunSummary> {
    let first = reports
        .first()
        .ok_or_else(|| FenecError::Aggregation("no reports to aggregate".into()))?;
    let t = first.n_tasks();
    if let Some(bad) = reports.iter().find(|r| r.n_tasks() != t) {
        return Err(FenecError::Aggregation(format!(
            "reports disagree on task count: {t} vs {}",
            bad.n_tasks()
        )));
    }
    let n = reports.len();
    let collect = |f: &dyn Fn(&RunReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let per_task = (0..t)
        .map(|i| {
            let s = summarize(&collect(&|r| r.per_task_accuracy[i]));
            let half = 1.96 * s.sd / (n as f64).sqrt();
            CurvePoint {
                task_index: i + 1,
                mean: s.mean,
                ci_low: s.mean - half,
                ci_high: s.mean + half,
            }
        })
        .collect();
    Ok(RunSummary {
        n_runs: n,
        average_incremental_accuracy: summarize(&collect(&|r| r.average_incremental_accuracy)),
        last_task_accuracy: summarize(&collect(&|r| r.last_task_accuracy)),
        per_task,
    })
}
