//! Exemplar-free class-incremental classification over frozen feature
//! embeddings.
//!
//! Each class is summarized by a shrunk, correlation-normalized covariance
//! (stored as its precision matrix) and a handful of k-means centroids.
//! Queries are classified either by an inverse-distance weighted kNN vote
//! over all centroids ([`FenecModel::predict_batch`]) or by log-distance
//! logits with a shared two-parameter head trained on the first task only
//! ([`FenecModel::predict_log_batch`]).

pub mod cli;
pub mod clustering;
mod codec;
pub mod covariance;
pub mod error;
pub mod feature_store;
pub mod fenec;
pub mod fenec_log;
pub mod params;
pub mod preprocessing;
pub mod protocol;

pub use clustering::{kmeans, CentroidSet, KMeans, KMeansFit};
pub use covariance::{ClassCovariance, DistanceMetric, ShrinkageParams};
pub use error::{FenecError, Result};
pub use feature_store::{
    build_task_stream, load_feature_file, load_split_file, write_feature_file, FeatureBatch,
    TaskStream,
};
pub use fenec::{FenecModel, Neighbor};
pub use fenec_log::{LogitHead, TrainConfig, TrainingHistory};
pub use params::{HyperParams, Method};
pub use preprocessing::PreprocessConfig;
pub use protocol::{aggregate_runs, run_protocol, RunReport, RunSummary};
