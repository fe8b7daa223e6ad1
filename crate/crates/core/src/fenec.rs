//! The FeNeC classifier: per-class shrunk Mahalanobis geometry plus k-means
//! centroids, queried with an inverse-distance weighted kNN vote.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, CentroidSet};
use crate::codec::{put_u32, ByteReader};
use crate::covariance::{squared_euclidean, ClassCovariance};
use crate::error::{FenecError, Result};
use crate::feature_store::FeatureBatch;
use crate::fenec_log::LogitHead;
use crate::params::HyperParams;

pub const MODEL_MAGIC: &[u8; 4] = b"FNCM";
pub const MODEL_VERSION: u8 = 1;

/// Stored statistics of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    covariance: ClassCovariance,
    centroids: CentroidSet,
    /// Centroids mapped through the class's distance factor.
    whitened: Vec<Vec<f64>>,
}

impl ClassEntry {
    pub fn new(covariance: ClassCovariance, centroids: CentroidSet) -> Result<Self> {
        if covariance.class_id() != centroids.class_id() {
            return Err(FenecError::Data(format!(
                "covariance for class {} paired with centroids of class {}",
                covariance.class_id(),
                centroids.class_id()
            )));
        }
        if covariance.n_features() != centroids.n_features() {
            return Err(FenecError::Shape(format!(
                "class {}: precision is {}-dimensional, centroids are {}-dimensional",
                covariance.class_id(),
                covariance.n_features(),
                centroids.n_features()
            )));
        }
        let whitened = (0..centroids.len())
            .map(|j| covariance.whiten(&centroids.centroid(j)))
            .collect();
        Ok(Self {
            covariance,
            centroids,
            whitened,
        })
    }

    pub fn covariance(&self) -> &ClassCovariance {
        &self.covariance
    }

    pub fn centroids(&self) -> &CentroidSet {
        &self.centroids
    }

    /// Squared distances from a preprocessed query to each centroid, in centroid order.
    pub fn distances(&self, x: &[f64]) -> Vec<f64> {
        let z = self.covariance.whiten(x);
        self.whitened
            .iter()
            .map(|c| squared_euclidean(&z, c))
            .collect()
    }
}

/// One scored centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub distance: f64,
    pub class_id: u32,
    pub centroid: usize,
}

/// Ordering used for neighbor selection: distance, then class id, then centroid index.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.centroid.cmp(&b.centroid))
}

/// Weighted kNN decision over candidate centroids.
///
/// The `n_neighbors` closest candidates are selected globally; each class
/// scores the sum of inverse squared distances of its selected centroids and
/// the highest score wins (smaller class id on ties). An exact hit returns
/// its class immediately.
pub fn weighted_knn_vote(candidates: &[Neighbor], n_neighbors: usize) -> Option<u32> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(neighbor_order);
    sorted.truncate(n_neighbors);
    let first = sorted.first()?;
    if first.distance == 0.0 {
        return Some(first.class_id);
    }
    let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
    for n in &sorted {
        *scores.entry(n.class_id).or_insert(0.0) += 1.0 / n.distance;
    }
    let mut best: Option<(u32, f64)> = None;
    for (&class_id, &score) in &scores {
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((class_id, score));
        }
    }
    best.map(|(c, _)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub hyper: HyperParams,
    pub seed: u64,
    pub n_features: usize,
    pub head: Option<LogitHead>,
}

/// Class statistics accumulated over tasks, plus the optional FeNeC-Log head.
#[derive(Debug, Clone, PartialEq)]
pub struct FenecModel {
    hyper: HyperParams,
    seed: u64,
    n_features: Option<usize>,
    classes: BTreeMap<u32, ClassEntry>,
    head: Option<LogitHead>,
}

impl FenecModel {
    pub fn new(hyper: HyperParams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            seed,
            n_features: None,
            classes: BTreeMap::new(),
            head: None,
        })
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_features(&self) -> Option<usize> {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn entry(&self, class_id: u32) -> Option<&ClassEntry> {
        self.classes.get(&class_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ClassEntry> + '_ {
        self.classes.values()
    }

    pub fn head(&self) -> Option<&LogitHead> {
        self.head.as_ref()
    }

    /// Installs a logit head, replacing any existing one.
    pub fn set_head(&mut self, head: LogitHead) {
        self.head = Some(head);
    }

    pub fn n_centroids(&self) -> usize {
        self.classes.values().map(|e| e.centroids.len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.hyper
            .parameter_count(self.n_classes(), self.n_features.unwrap_or(0))
    }

    /// k-means seed of one class; independent of the order classes arrive in.
    pub fn class_seed(&self, class_id: u32) -> u64 {
        splitmix64(self.seed ^ splitmix64(u64::from(class_id)))
    }

    /// Fits every class of `train` and adds it to the model. Existing classes
    /// are never touched; on error the model is left unchanged.
    pub fn fit_task(&mut self, train: &FeatureBatch) -> Result<()> {
        if let Some(f) = self.n_features {
            if train.n_features() != f {
                return Err(FenecError::Shape(format!(
                    "model has {f} features, task has {}",
                    train.n_features()
                )));
            }
        }
        let groups = train.rows_by_class();
        for &class_id in groups.keys() {
            if self.classes.contains_key(&class_id) {
                return Err(FenecError::DuplicateClass(class_id));
            }
        }
        let preprocess = self.hyper.preprocess();
        let shrinkage = self.hyper.shrinkage();
        let metric = self.hyper.metric;
        let n_clusters = self.hyper.n_clusters;

        let fitted: Vec<ClassEntry> = groups
            .par_iter()
            .map(|(&class_id, rows)| {
                if rows.len() < 2 {
                    return Err(FenecError::InsufficientData {
                        class_id: Some(class_id),
                        samples: rows.len(),
                        needed: 2,
                    });
                }
                let x = preprocess.apply(&train.features().select_rows(rows))?;
                let covariance = ClassCovariance::fit(class_id, &x, &shrinkage, metric)?;
                let centroids = kmeans(class_id, &x, n_clusters, self.class_seed(class_id))
                    .map_err(|e| match e {
                        FenecError::Cardinality { k, rows } => FenecError::Data(format!(
                            "class {class_id}: cannot select {k} clusters from {rows} samples"
                        )),
                        other => other,
                    })?;
                ClassEntry::new(covariance, centroids)
            })
            .collect::<Result<_>>()?;

        self.n_features = Some(train.n_features());
        for entry in fitted {
            self.classes.insert(entry.covariance.class_id(), entry);
        }
        log::debug!(
            "fitted {} classes, model now holds {}",
            groups.len(),
            self.classes.len()
        );
        Ok(())
    }

    /// Applies the configured Tukey transform / normalization to raw queries.
    pub fn preprocess(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_query_dim(x.ncols())?;
        self.hyper.preprocess().apply(x)
    }

    pub(crate) fn check_query_dim(&self, n_features: usize) -> Result<()> {
        match self.n_features {
            None => Err(FenecError::Data("model stores no classes".into())),
            Some(f) if f != n_features => Err(FenecError::Shape(format!(
                "query has {n_features} features, model expects {f}"
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Squared distance from a preprocessed query to every stored centroid,
    /// grouped by class in ascending class order.
    pub fn neighbors(&self, x: &[f64]) -> Vec<Neighbor> {
        let mut out = Vec::with_capacity(self.n_centroids());
        for (&class_id, entry) in &self.classes {
            for (centroid, distance) in entry.distances(x).into_iter().enumerate() {
                out.push(Neighbor {
                    distance,
                    class_id,
                    centroid,
                });
            }
        }
        out
    }

    fn knn_predict_preprocessed(&self, x: &[f64]) -> Result<u32> {
        let k = self.hyper.n_neighbors_or_points;
        let available = self.n_centroids();
        if k > available {
            return Err(FenecError::Config(format!(
                "n_neighbors = {k} exceeds the {available} stored centroids"
            )));
        }
        weighted_knn_vote(&self.neighbors(x), k)
            .ok_or_else(|| FenecError::Data("model stores no classes".into()))
    }

    /// FeNeC decision for a single raw query.
    pub fn predict(&self, x: &[f64]) -> Result<u32> {
        let m = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.predict_batch(&m)?[0])
    }

    /// FeNeC decision for every row of `x`; identical to calling [`predict`](Self::predict) per row.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Result<Vec<u32>> {
        let q = self.preprocess(x)?.transpose();
        q.as_slice()
            .par_chunks_exact(q.nrows())
            .map(|row| self.knn_predict_preprocessed(row))
            .collect()
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            hyper: self.hyper.clone(),
            seed: self.seed,
            n_features: self.n_features.unwrap_or(0),
            head: self.head.clone(),
        }
    }

    /// Binary model dump: `FNCM`, version, length-prefixed JSON header, class
    /// count, then an `FCOV` and an `FCTR` section per class.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put_u32(&mut out, self.classes.len() as u32);
        for entry in self.classes.values() {
            entry.covariance.write_section(&mut out);
            entry.centroids.write_section(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u8("model version")?;
        if version != MODEL_VERSION {
            return Err(FenecError::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let header_len = r.u32("header length")? as usize;
        let header: ModelHeader = serde_json::from_slice(r.take(header_len, "model header")?)
            .map_err(|e| FenecError::Corrupt(format!("model header: {e}")))?;
        header.hyper.validate()?;
        let n_classes = r.u32("class count")? as usize;
        let mut classes = BTreeMap::new();
        for _ in 0..n_classes {
            let covariance = ClassCovariance::read_section(&mut r, header.hyper.metric)?;
            let centroids = CentroidSet::read_section(&mut r)?;
            if covariance.n_features() != header.n_features {
                return Err(FenecError::Corrupt(format!(
                    "class {} has dimension {}, header says {}",
                    covariance.class_id(),
                    covariance.n_features(),
                    header.n_features
                )));
            }
            if centroids.len() != header.hyper.n_clusters {
                return Err(FenecError::Corrupt(format!(
                    "class {} stores {} centroids, expected {}",
                    centroids.class_id(),
                    centroids.len(),
                    header.hyper.n_clusters
                )));
            }
            let entry = ClassEntry::new(covariance, centroids)?;
            let id = entry.covariance.class_id();
            if classes.insert(id, entry).is_some() {
                return Err(FenecError::Corrupt(format!("class {id} stored twice")));
            }
        }
        if !r.is_empty() {
            return Err(FenecError::Corrupt(
                "trailing bytes after last class".into(),
            ));
        }
        Ok(Self {
            hyper: header.hyper,
            seed: header.seed,
            n_features: (n_classes > 0).then_some(header.n_features),
            classes,
            head: header.head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| FenecError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| FenecError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            FenecError::Corrupt(m) => FenecError::Corrupt(format!("{}: {m}", path.display())),
            FenecError::Format(m) => FenecError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
