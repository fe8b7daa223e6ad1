//! Loading, validation and task partitioning of exported feature datasets.
//!
//! Features live on disk in the little-endian FENC container:
//!
//! ```text
//! "FENC" | u8 version (=1) | u32 n_samples | u32 n_features
//!        | n_samples * n_features f32, row-major
//!        | n_samples u32 labels
//! ```
//!
//! Values are promoted to `f64` on load. Every `f32` is exactly representable
//! as `f64`, so loading and re-writing a file reproduces it byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{FenecError, Result};

pub const FENC_MAGIC: &[u8; 4] = b"FENC";
pub const FENC_VERSION: u8 = 1;
const FENC_HEADER_LEN: usize = 4 + 1 + 4 + 4;

/// Dense matrix of feature vectors (one row per sample) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: DMatrix<f64>,
    labels: Vec<u32>,
}

impl FeatureBatch {
    pub fn new(features: DMatrix<f64>, labels: Vec<u32>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(FenecError::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(FenecError::Data(
                "feature dimension must be positive".into(),
            ));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            // column-major storage
            let (row, col) = (pos % features.nrows(), pos / features.nrows());
            return Err(FenecError::Data(format!(
                "non-finite feature value at row {row}, column {col}"
            )));
        }
        Ok(Self { features, labels })
    }

    /// Builds a batch from row-major data.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u32>) -> Result<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_features) {
            return Err(FenecError::Shape("ragged feature rows".into()));
        }
        let features = DMatrix::from_fn(rows.len(), n_features, |i, j| rows[i][j]);
        Self::new(features, labels)
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    /// Row indices grouped by label, each group in original row order.
    pub fn rows_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &label) in self.labels.iter().enumerate() {
            groups.entry(label).or_default().push(i);
        }
        groups
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureBatch {
        FeatureBatch {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &BTreeSet<u32>) -> FeatureBatch {
        let rows: Vec<usize> = (0..self.n_samples())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.select_rows(&rows)
    }

    /// Feature matrix of a single class.
    pub fn class_features(&self, class_id: u32) -> DMatrix<f64> {
        let rows: Vec<usize> = (0..self.n_samples())
            .filter(|&i| self.labels[i] == class_id)
            .collect();
        self.features.select_rows(&rows)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, f) = self.features.shape();
        let mut out = Vec::with_capacity(FENC_HEADER_LEN + n * f * 4 + n * 4);
        out.extend_from_slice(FENC_MAGIC);
        out.push(FENC_VERSION);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(f as u32).to_le_bytes());
        for i in 0..n {
            for j in 0..f {
                out.extend_from_slice(&(self.features[(i, j)] as f32).to_le_bytes());
            }
        }
        for &label in &self.labels {
            out.extend_from_slice(&label.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (n, f) = parse_header(bytes)?;
        let expected = n
            .checked_mul(f)
            .and_then(|nf| nf.checked_add(n))
            .and_then(|words| words.checked_mul(4))
            .and_then(|b| b.checked_add(FENC_HEADER_LEN))
            .ok_or_else(|| FenecError::Corrupt(format!("declared size {n} x {f} overflows")))?;
        if bytes.len() < expected {
            return Err(FenecError::Corrupt(format!(
                "declared {n} samples x {f} features needs {expected} bytes, found {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(FenecError::Corrupt(format!(
                "{} trailing bytes after label block",
                bytes.len() - expected
            )));
        }
        let payload = &bytes[FENC_HEADER_LEN..FENC_HEADER_LEN + n * f * 4];
        let features = DMatrix::from_row_iterator(
            n,
            f,
            payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4")))),
        );
        let labels = bytes[FENC_HEADER_LEN + n * f * 4..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        FeatureBatch::new(features, labels)
    }
}

/// Validates the fixed header and returns `(n_samples, n_features)`.
pub fn parse_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < FENC_HEADER_LEN {
        return Err(FenecError::Format(format!(
            "file too short for FENC header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != FENC_MAGIC {
        return Err(FenecError::Format("bad magic, expected FENC".into()));
    }
    if bytes[4] != FENC_VERSION {
        return Err(FenecError::Format(format!(
            "unsupported FENC version {}",
            bytes[4]
        )));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if f == 0 {
        return Err(FenecError::Format("n_features must be positive".into()));
    }
    Ok((n, f))
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureBatch> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FenecError::io(path, e))?;
    FeatureBatch::from_bytes(&bytes).map_err(|e| match e {
        FenecError::Format(m) => FenecError::Format(format!("{}: {m}", path.display())),
        FenecError::Corrupt(m) => FenecError::Corrupt(format!("{}: {m}", path.display())),
        FenecError::Data(m) => FenecError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads only the header: `(n_samples, n_features)`.
pub fn read_feature_header(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| FenecError::io(path, e))?;
    let mut buf = [0u8; FENC_HEADER_LEN];
    file.read_exact(&mut buf)
        .map_err(|_| FenecError::Format(format!("{}: truncated FENC header", path.display())))?;
    parse_header(&buf)
}

pub fn write_feature_file(path: impl AsRef<Path>, batch: &FeatureBatch) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, batch.to_bytes()).map_err(|e| FenecError::io(path, e))
}

/// Task split: ordered class-id lists, one per task.
pub fn load_split_file(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FenecError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FenecError::Split(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct Task {
    classes: Vec<u32>,
    train: FeatureBatch,
    test_rows: Vec<usize>,
    test_source: Arc<FeatureBatch>,
}

impl Task {
    /// New classes introduced by this task, in split order.
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn train(&self) -> &FeatureBatch {
        &self.train
    }

    /// Test rows of every class seen up to and including this task.
    pub fn test(&self) -> FeatureBatch {
        self.test_source.select_rows(&self.test_rows)
    }

    pub fn n_test(&self) -> usize {
        self.test_rows.len()
    }
}

/// Class-incremental sequence of tasks with disjoint class sets.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<Task>,
    cumulative_classes: Vec<BTreeSet<u32>>,
}

impl TaskStream {
    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn cumulative_classes(&self) -> &[BTreeSet<u32>] {
        &self.cumulative_classes
    }

    pub fn n_features(&self) -> usize {
        self.tasks[0].train.n_features()
    }
}

pub fn build_task_stream(
    train: &FeatureBatch,
    test: &FeatureBatch,
    split: &[Vec<u32>],
) -> Result<TaskStream> {
    if split.is_empty() {
        return Err(FenecError::Split(
            "split must contain at least one task".into(),
        ));
    }
    if train.n_features() != test.n_features() {
        return Err(FenecError::Shape(format!(
            "train has {} features, test has {}",
            train.n_features(),
            test.n_features()
        )));
    }

    let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
    for (t, classes) in split.iter().enumerate() {
        if classes.is_empty() {
            return Err(FenecError::Split(format!("task {} has no classes", t + 1)));
        }
        for &c in classes {
            if let Some(prev) = owner.insert(c, t) {
                return Err(FenecError::Split(format!(
                    "class {c} appears in task {} and task {}",
                    prev + 1,
                    t + 1
                )));
            }
        }
    }
    for &label in train.labels().iter().chain(test.labels()) {
        if !owner.contains_key(&label) {
            return Err(FenecError::Coverage { label });
        }
    }

    let mut train_rows: Vec<Vec<usize>> = vec![Vec::new(); split.len()];
    for (i, label) in train.labels().iter().enumerate() {
        train_rows[owner[label]].push(i);
    }

    let test_source = Arc::new(test.clone());
    let mut tasks = Vec::with_capacity(split.len());
    let mut cumulative_classes = Vec::with_capacity(split.len());
    let mut seen = BTreeSet::new();
    for (t, classes) in split.iter().enumerate() {
        seen.extend(classes.iter().copied());
        tasks.push(Task {
            classes: classes.clone(),
            train: train.select_rows(&train_rows[t]),
            test_rows: (0..test.n_samples())
                .filter(|&i| seen.contains(&test.labels()[i]))
                .collect(),
            test_source: Arc::clone(&test_source),
        });
        cumulative_classes.push(seen.clone());
    }
    Ok(TaskStream {
        tasks,
        cumulative_classes,
    })
}
