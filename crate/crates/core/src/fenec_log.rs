//! FeNeC-Log: per-class logits built from log squared Mahalanobis distances
//! to the `N_points` nearest centroids of each class, with two scalars `(a, b)`
//! shared by all classes. The scalars are trained with minibatch SGD on the
//! first task only and frozen afterwards.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FenecError, Result};
use crate::feature_store::FeatureBatch;
use crate::fenec::{neighbor_order, FenecModel, Neighbor};
use crate::params::Method;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Floor applied to squared distances before taking logarithms during training.
const MIN_SQUARED_DISTANCE: f64 = f64::MIN_POSITIVE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitHead {
    pub a: f64,
    pub b: f64,
    pub leaky_slope: f64,
    pub frozen: bool,
}

impl LogitHead {
    pub fn new(a: f64, b: f64) -> Self {
        Self {
            a,
            b,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            frozen: false,
        }
    }

    pub fn activate(&self, z: f64) -> f64 {
        if z >= 0.0 {
            z
        } else {
            self.leaky_slope * z
        }
    }

    /// Derivative of the activation; the positive branch owns `z = 0`.
    pub fn activation_slope(&self, z: f64) -> f64 {
        if z >= 0.0 {
            1.0
        } else {
            self.leaky_slope
        }
    }

    /// `Σ LeakyReLU(a + b·u)` over log squared distances `u`.
    pub fn logit(&self, log_distances: &[f64]) -> f64 {
        log_distances
            .iter()
            .map(|u| self.activate(self.a + self.b * u))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Batch 64, at most 1000 epochs, patience 10, 10% validation split.
    pub fn new(learning_rate: f64, seed: u64) -> Self {
        Self {
            learning_rate,
            batch_size: 64,
            max_epochs: 1000,
            patience: 10,
            validation_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FenecError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(FenecError::Config(
                "batch_size, max_epochs and patience must be at least 1".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(FenecError::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Patience counter over validation losses; only strict decreases count as progress.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's validation loss; returns whether it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Log squared distances of one sample to the nearest centroids of every
/// class, in ascending class order, with the index of its true class.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSample {
    pub log_distances: Vec<Vec<f64>>,
    pub target: usize,
}

impl HeadSample {
    pub fn logits(&self, head: &LogitHead) -> Vec<f64> {
        self.log_distances.iter().map(|u| head.logit(u)).collect()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of the softmax over class logits.
pub fn head_loss(samples: &[HeadSample], head: &LogitHead) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let logits = s.logits(head);
            log_sum_exp(&logits) - logits[s.target]
        })
        .sum();
    total / samples.len() as f64
}

/// Analytic gradient of [`head_loss`] with respect to `(a, b)`.
pub fn head_gradients(samples: &[HeadSample], head: &LogitHead) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let (mut ga, mut gb) = (0.0, 0.0);
    for s in samples {
        let probs = softmax(&s.logits(head));
        for (c, (u, p)) in s.log_distances.iter().zip(&probs).enumerate() {
            let delta = p - if c == s.target { 1.0 } else { 0.0 };
            for &u in u {
                let slope = head.activation_slope(head.a + head.b * u);
                ga += delta * slope;
                gb += delta * slope * u;
            }
        }
    }
    let n = samples.len() as f64;
    (ga / n, gb / n)
}

/// Fraction of samples whose largest logit is the target (first index on ties).
pub fn head_accuracy(samples: &[HeadSample], head: &LogitHead) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| {
            let logits = s.logits(head);
            let best = logits
                .iter()
                .enumerate()
                .fold(0, |b, (i, &l)| if l > logits[b] { i } else { b });
            best == s.target
        })
        .count();
    hits as f64 / samples.len() as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
    /// Zero-based epoch whose head is returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn epochs(&self) -> usize {
        self.validation_loss.len()
    }
}

/// Outcome of scoring one query against the stored classes.
enum Scored {
    /// Exact hit on a centroid of this class.
    Hit(u32),
    /// Log squared distances per class (ascending class order).
    Logs(Vec<Vec<f64>>),
}

impl FenecModel {
    /// `N_points` used by the logit head, clamped to the stored cluster count.
    pub fn effective_points(&self) -> usize {
        let requested = self.hyper().n_neighbors_or_points;
        let n_clusters = self.hyper().n_clusters;
        if requested > n_clusters {
            log::warn!(
                "n_points = {requested} exceeds n_clusters = {n_clusters}; using {n_clusters}"
            );
            n_clusters
        } else {
            requested
        }
    }

    /// Squared distances to the `n_points` nearest centroids of every class.
    fn nearest_per_class(&self, x: &[f64], n_points: usize) -> Vec<(u32, Vec<Neighbor>)> {
        let mut grouped: Vec<(u32, Vec<Neighbor>)> = Vec::with_capacity(self.n_classes());
        for nb in self.neighbors(x) {
            match grouped.last_mut() {
                Some((c, list)) if *c == nb.class_id => list.push(nb),
                _ => grouped.push((nb.class_id, vec![nb])),
            }
        }
        for (_, list) in &mut grouped {
            list.sort_by(neighbor_order);
            list.truncate(n_points);
        }
        grouped
    }

    fn score(&self, x: &[f64], n_points: usize) -> Scored {
        let grouped = self.nearest_per_class(x, n_points);
        if let Some(hit) = grouped
            .iter()
            .find(|(_, list)| list.first().is_some_and(|n| n.distance == 0.0))
        {
            return Scored::Hit(hit.0);
        }
        Scored::Logs(
            grouped
                .into_iter()
                .map(|(_, list)| list.iter().map(|n| n.distance.ln()).collect())
                .collect(),
        )
    }

    /// Logit of one class for a preprocessed query.
    pub fn class_logit(
        &self,
        x: &[f64],
        class_id: u32,
        head: &LogitHead,
        n_points: usize,
    ) -> Result<f64> {
        self.check_query_dim(x.len())?;
        let entry = self
            .entry(class_id)
            .ok_or_else(|| FenecError::Data(format!("class {class_id} is not stored")))?;
        let mut d = entry.distances(x);
        d.sort_by(f64::total_cmp);
        d.truncate(n_points.min(d.len()));
        let logs: Vec<f64> = d.iter().map(|v| v.ln()).collect();
        Ok(head.logit(&logs))
    }

    fn trained_head(&self) -> Result<&LogitHead> {
        self.head()
            .ok_or_else(|| FenecError::Config("logit head has not been trained".into()))
    }

    /// Class probabilities for each raw query row, columns in ascending class order.
    pub fn predict_proba_batch(&self, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        let head = self.trained_head()?.clone();
        let n_points = self.effective_points();
        let class_ids: Vec<u32> = self.class_ids().collect();
        let q = self.preprocess(x)?.transpose();
        Ok(q.as_slice()
            .par_chunks_exact(q.nrows())
            .map(|row| match self.score(row, n_points) {
                Scored::Hit(c) => class_ids
                    .iter()
                    .map(|&k| if k == c { 1.0 } else { 0.0 })
                    .collect(),
                Scored::Logs(logs) => {
                    let logits: Vec<f64> = logs.iter().map(|u| head.logit(u)).collect();
                    softmax(&logits)
                }
            })
            .collect())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.predict_proba_batch(&m)?.remove(0))
    }

    /// FeNeC-Log decision: the class with the largest logit (smaller id on ties).
    pub fn predict_log_batch(&self, x: &DMatrix<f64>) -> Result<Vec<u32>> {
        let head = self.trained_head()?.clone();
        let n_points = self.effective_points();
        let class_ids: Vec<u32> = self.class_ids().collect();
        let q = self.preprocess(x)?.transpose();
        Ok(q.as_slice()
            .par_chunks_exact(q.nrows())
            .map(|row| match self.score(row, n_points) {
                Scored::Hit(c) => c,
                Scored::Logs(logs) => {
                    let mut best = (0, f64::NEG_INFINITY);
                    for (i, u) in logs.iter().enumerate() {
                        let l = head.logit(u);
                        if l > best.1 {
                            best = (i, l);
                        }
                    }
                    class_ids[best.0]
                }
            })
            .collect())
    }

    /// Decision of the configured method for every raw query row.
    pub fn classify_batch(&self, x: &DMatrix<f64>) -> Result<Vec<u32>> {
        match self.hyper().method {
            Method::Fenec => self.predict_batch(x),
            Method::FenecLog => self.predict_log_batch(x),
        }
    }

    /// Precomputes the head's inputs for labelled rows; labels must be stored classes.
    pub fn head_samples(&self, batch: &FeatureBatch) -> Result<Vec<HeadSample>> {
        let n_points = self.effective_points();
        let class_ids: Vec<u32> = self.class_ids().collect();
        let q = self.preprocess(batch.features())?.transpose();
        q.as_slice()
            .par_chunks_exact(q.nrows())
            .zip(batch.labels().par_iter())
            .map(|(row, label)| {
                let target = class_ids.binary_search(label).map_err(|_| {
                    FenecError::Data(format!("label {label} is not a stored class"))
                })?;
                let log_distances = self
                    .nearest_per_class(row, n_points)
                    .into_iter()
                    .map(|(_, list)| {
                        list.iter()
                            .map(|n| n.distance.max(MIN_SQUARED_DISTANCE).ln())
                            .collect()
                    })
                    .collect();
                Ok(HeadSample {
                    log_distances,
                    target,
                })
            })
            .collect()
    }

    /// Trains `(a, b)` on the first task's training data, freezes the head
    /// and stores it in the model.
    pub fn train_head(
        &mut self,
        task1: &FeatureBatch,
        cfg: &TrainConfig,
    ) -> Result<TrainingHistory> {
        if self.head().is_some_and(|h| h.frozen) {
            return Err(FenecError::Config(
                "logit head is frozen and cannot be retrained".into(),
            ));
        }
        let (head, history) = train_head(self, task1, cfg)?;
        self.set_head(head);
        Ok(history)
    }
}

/// Stratified train/validation split of row indices; every class with at
/// least two rows contributes at least one row to each side.
pub fn stratified_split(
    labels: &[u32],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for rows in by_class.values_mut() {
        rows.shuffle(rng);
        let n = rows.len();
        let n_val = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        val.extend_from_slice(&rows[..n_val]);
        train.extend_from_slice(&rows[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Minibatch SGD on cross-entropy with early stopping; returns the frozen
/// head from the epoch with the lowest validation loss.
pub fn train_head(
    model: &FenecModel,
    task1: &FeatureBatch,
    cfg: &TrainConfig,
) -> Result<(LogitHead, TrainingHistory)> {
    cfg.validate()?;
    if task1.classes().len() < 2 {
        return Err(FenecError::DegenerateLoss(
            "first task must contain at least two classes".into(),
        ));
    }
    if let Some(c) = task1
        .classes()
        .into_iter()
        .find(|c| model.entry(*c).is_none())
    {
        return Err(FenecError::Data(format!(
            "class {c} must be fitted before training the head"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = LogitHead::new(
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
    );

    let samples = model.head_samples(task1)?;
    let (train_idx, val_idx) = stratified_split(task1.labels(), cfg.validation_fraction, &mut rng);
    let train: Vec<HeadSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val: Vec<HeadSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainingHistory::default();
    let mut best = head.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<HeadSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (ga, gb) = head_gradients(&batch, &head);
            head.a -= cfg.learning_rate * ga;
            head.b -= cfg.learning_rate * gb;
        }
        let train_loss = head_loss(&train, &head);
        let val_loss = head_loss(&val, &head);
        history.train_loss.push(train_loss);
        history.validation_loss.push(val_loss);
        history.validation_accuracy.push(head_accuracy(&val, &head));
        if stopper.observe(val_loss) {
            best = head.clone();
            history.best_epoch = epoch;
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    log::info!(
        "head trained for {} epochs (best {}, validation loss {:.6}): a = {}, b = {}",
        history.epochs(),
        history.best_epoch + 1,
        stopper.best(),
        best.a,
        best.b
    );
    best.frozen = true;
    Ok((best, history))
}
