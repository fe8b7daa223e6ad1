//! Synthetic data and independent reference implementations shared by the
//! integration tests.

#![allow(dead_code)]

use std::path::Path;

use fenec::{FeatureBatch, HyperParams, Method};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `per_class` samples around each mean, with independent per-class scales.
pub fn blobs(
    rng: &mut ChaCha8Rng,
    means: &[(u32, Vec<f64>)],
    per_class: usize,
    sigma: f64,
) -> FeatureBatch {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (class_id, mu) in means {
        let scales: Vec<f64> = mu
            .iter()
            .map(|_| sigma * rng.random_range(0.5..1.5))
            .collect();
        for _ in 0..per_class {
            rows.push(
                mu.iter()
                    .zip(&scales)
                    .map(|(m, s)| m + s * gaussian(rng))
                    .collect::<Vec<f64>>(),
            );
            labels.push(*class_id);
        }
    }
    FeatureBatch::from_rows(&rows, labels).unwrap()
}

/// Class means placed `separation` apart along distinct axes.
pub fn separated_means(
    n_classes: usize,
    n_features: usize,
    separation: f64,
) -> Vec<(u32, Vec<f64>)> {
    assert!(n_features >= n_classes);
    (0..n_classes)
        .map(|c| {
            let mut mu = vec![0.0; n_features];
            mu[c] = separation;
            (c as u32, mu)
        })
        .collect()
}

pub fn fenec_hyper(n_clusters: usize, n_neighbors: usize) -> HyperParams {
    HyperParams {
        method: Method::Fenec,
        n_clusters,
        n_neighbors_or_points: n_neighbors,
        tukey_lambda: None,
        gamma1: 1.0,
        gamma2: 1.0,
        shrink_repetitions: 1,
        metric: Default::default(),
        sample_normalize: false,
        learning_rate: None,
    }
}

pub fn fenec_log_hyper(n_clusters: usize, n_points: usize, learning_rate: f64) -> HyperParams {
    HyperParams {
        method: Method::FenecLog,
        learning_rate: Some(learning_rate),
        ..fenec_hyper(n_clusters, n_points)
    }
}

/// Sample covariance with an `n - 1` denominator, by explicit loops.
pub fn naive_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, f) = x.shape();
    let mean: Vec<f64> = (0..f)
        .map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64)
        .collect();
    DMatrix::from_fn(f, f, |a, b| {
        (0..n)
            .map(|i| (x[(i, a)] - mean[a]) * (x[(i, b)] - mean[b]))
            .sum::<f64>()
            / (n as f64 - 1.0)
    })
}

/// Diagonal and off-diagonal shrinkage followed by correlation scaling,
/// written directly from the definitions.
pub fn naive_shrunk_correlation(
    sigma: &DMatrix<f64>,
    gamma1: f64,
    gamma2: f64,
    repetitions: usize,
) -> DMatrix<f64> {
    let f = sigma.nrows();
    let mut s = sigma.clone();
    for _ in 0..repetitions {
        let diag_mean = (0..f).map(|i| s[(i, i)]).sum::<f64>() / f as f64;
        let mut off = 0.0;
        for i in 0..f {
            for j in 0..f {
                if i != j {
                    off += s[(i, j)];
                }
            }
        }
        let off_mean = if f > 1 { off / (f * f - f) as f64 } else { 0.0 };
        s = DMatrix::from_fn(f, f, |i, j| {
            if i == j {
                s[(i, j)] + gamma1 * diag_mean
            } else {
                s[(i, j)] + gamma2 * off_mean
            }
        });
    }
    DMatrix::from_fn(f, f, |i, j| s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt())
}

/// `(x - mu)^T P (x - mu)` by explicit loops.
pub fn quadratic_form(x: &[f64], mu: &[f64], precision: &DMatrix<f64>) -> f64 {
    let d: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for i in 0..d.len() {
        for j in 0..d.len() {
            total += d[i] * precision[(i, j)] * d[j];
        }
    }
    total
}

/// Brute-force nearest class mean under each class's shrunk Mahalanobis
/// metric, with the inverse taken by LU decomposition.
pub struct PrototypeOracle {
    classes: Vec<(u32, Vec<f64>, DMatrix<f64>)>,
    tukey_lambda: Option<f64>,
}

impl PrototypeOracle {
    pub fn fit(train: &FeatureBatch, hyper: &HyperParams) -> Self {
        let x = match hyper.tukey_lambda {
            Some(l) => train.features().map(|v| v.powf(l)),
            None => train.features().clone(),
        };
        let mut ids: Vec<u32> = train.labels().to_vec();
        ids.sort_unstable();
        ids.dedup();
        let classes = ids
            .into_iter()
            .map(|c| {
                let rows: Vec<usize> = (0..x.nrows()).filter(|&i| train.labels()[i] == c).collect();
                let xc = x.select_rows(&rows);
                let n = xc.nrows() as f64;
                let mean: Vec<f64> = (0..xc.ncols()).map(|j| xc.column(j).sum() / n).collect();
                let corr = naive_shrunk_correlation(
                    &naive_covariance(&xc),
                    hyper.gamma1,
                    hyper.gamma2,
                    hyper.shrink_repetitions as usize,
                );
                let precision = corr.lu().try_inverse().expect("invertible");
                (c, mean, precision)
            })
            .collect();
        Self {
            classes,
            tukey_lambda: hyper.tukey_lambda,
        }
    }

    pub fn predict(&self, x: &[f64]) -> u32 {
        let x: Vec<f64> = match self.tukey_lambda {
            Some(l) => x.iter().map(|v| v.powf(l)).collect(),
            None => x.to_vec(),
        };
        let mut best = (u32::MAX, f64::INFINITY);
        for (c, mu, p) in &self.classes {
            let d = quadratic_form(&x, mu, p);
            if d < best.1 {
                best = (*c, d);
            }
        }
        best.0
    }
}

/// Literal weighted kNN rule: rank every centroid by distance (class id and
/// centroid index break ties), keep the first `k`, score each class by the
/// sum of `1/d`, and take the highest score with the smaller class id on ties.
pub fn literal_vote(centroids: &[(u32, usize, f64)], k: usize) -> u32 {
    let mut ranked = centroids.to_vec();
    ranked.sort_by(|a, b| {
        a.2.partial_cmp(&b.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let chosen = &ranked[..k];
    let mut ids: Vec<u32> = centroids.iter().map(|c| c.0).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut best = (u32::MAX, f64::NEG_INFINITY);
    for c in ids {
        let score: f64 = chosen.iter().filter(|n| n.0 == c).map(|n| 1.0 / n.2).sum();
        if score > best.1 {
            best = (c, score);
        }
    }
    best.0
}

pub fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}
