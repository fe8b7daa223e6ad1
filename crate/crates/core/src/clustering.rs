//! Per-class k-means used to compress a class into a fixed number of centroids.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{put_f64, put_u32, ByteReader};
use crate::covariance::squared_euclidean;
use crate::error::{FenecError, Result};

pub const FCTR_MAGIC: &[u8; 4] = b"FCTR";

/// Centroids of one class, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    class_id: u32,
    centroids: DMatrix<f64>,
}

impl CentroidSet {
    pub fn new(class_id: u32, centroids: DMatrix<f64>) -> Result<Self> {
        if centroids.nrows() == 0 || centroids.ncols() == 0 {
            return Err(FenecError::Shape(format!(
                "class {class_id}: empty centroid set"
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(FenecError::Data(format!(
                "class {class_id}: non-finite centroid"
            )));
        }
        Ok(Self {
            class_id,
            centroids,
        })
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn centroids(&self) -> &DMatrix<f64> {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.centroids.ncols()
    }

    /// Centroid `j` as a contiguous vector.
    pub fn centroid(&self, j: usize) -> Vec<f64> {
        self.centroids.row(j).iter().copied().collect()
    }

    pub(crate) fn write_section(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(FCTR_MAGIC);
        put_u32(out, self.class_id);
        put_u32(out, self.len() as u32);
        put_u32(out, self.n_features() as u32);
        for i in 0..self.len() {
            for j in 0..self.n_features() {
                put_f64(out, self.centroids[(i, j)]);
            }
        }
    }

    pub(crate) fn read_section(reader: &mut ByteReader<'_>) -> Result<Self> {
        reader.expect_magic(FCTR_MAGIC)?;
        let class_id = reader.u32("FCTR class id")?;
        let k = reader.u32("FCTR k")? as usize;
        let f = reader.u32("FCTR n_features")? as usize;
        let len = k
            .checked_mul(f)
            .ok_or_else(|| FenecError::Corrupt("FCTR size overflows".into()))?;
        let values = reader.f64_vec(len, "FCTR payload")?;
        Self::new(class_id, DMatrix::from_row_slice(k, f, &values))
    }
}

/// Lloyd's algorithm with k-means++ seeding.
#[derive(Debug, Clone, Copy)]
pub struct KMeans {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// `k × n_features`, one centroid per row.
    pub centroids: DMatrix<f64>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
        }
    }

    pub fn fit(&self, x: &DMatrix<f64>) -> Result<KMeansFit> {
        let (n, f) = x.shape();
        if n == 0 || self.k == 0 || self.k > n {
            return Err(FenecError::Cardinality { k: self.k, rows: n });
        }
        // samples as contiguous columns
        let xt = x.transpose();
        let points: Vec<&[f64]> = xt.as_slice().chunks_exact(f).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut centroids = plus_plus_init(&points, self.k, &mut rng);

        let mut assignments = vec![0usize; n];
        let mut dists = vec![0.0f64; n];
        let mut history = Vec::new();
        let mut iterations = 0;
        while iterations < self.max_iter {
            iterations += 1;
            assign(&points, &centroids, &mut assignments, &mut dists);
            repair_empty_clusters(
                self.k,
                &mut centroids,
                &points,
                &mut assignments,
                &mut dists,
            );

            let updated = recompute_means(&points, &assignments, self.k, f);
            let shift = centroids
                .iter()
                .zip(&updated)
                .map(|(a, b)| squared_euclidean(a, b).sqrt())
                .fold(0.0f64, f64::max);
            centroids = updated;
            history.push(objective(&points, &centroids, &assignments));
            if shift < self.tol {
                break;
            }
        }

        Ok(KMeansFit {
            centroids: DMatrix::from_fn(self.k, f, |i, j| centroids[i][j]),
            assignments,
            objective_history: history,
            iterations,
        })
    }
}

/// k-means centroids of one class, deterministic in `seed`.
pub fn kmeans(class_id: u32, x: &DMatrix<f64>, k: usize, seed: u64) -> Result<CentroidSet> {
    let fit = KMeans::new(k, seed).fit(x)?;
    CentroidSet::new(class_id, fit.centroids)
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| squared_euclidean(p, &centroids[0]))
        .collect();

    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c = points[next].to_vec();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(squared_euclidean(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>], assignments: &mut [usize], dists: &mut [f64]) {
    for (i, p) in points.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (j, c) in centroids.iter().enumerate() {
            let d = squared_euclidean(p, c);
            if d < best.0 {
                best = (d, j);
            }
        }
        assignments[i] = best.1;
        dists[i] = best.0;
    }
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Only clusters with at least two members donate, so no new empty cluster appears.
fn repair_empty_clusters(
    k: usize,
    centroids: &mut [Vec<f64>],
    points: &[&[f64]],
    assignments: &mut [usize],
    dists: &mut [f64],
) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[assignments[i]] >= 2)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("k <= n guarantees a cluster with two members");
        centroids[empty] = points[donor].to_vec();
        assignments[donor] = empty;
        dists[donor] = 0.0;
    }
}

fn recompute_means(points: &[&[f64]], assignments: &[usize], k: usize, f: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; f]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        let c = c as f64;
        for v in s.iter_mut() {
            *v /= c;
        }
    }
    sums
}

fn objective(points: &[&[f64]], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_euclidean(p, &centroids[a]))
        .sum()
}
