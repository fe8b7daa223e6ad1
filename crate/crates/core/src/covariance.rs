//! Per-class covariance estimation, shrinkage, correlation normalization,
//! SPD inversion and the squared-distance kernels built on top of them.
//!
//! The stored form of a class is its precision matrix `P`. Distances are
//! evaluated through the lower Cholesky factor `L` of `P` (`P = L Lᵀ`), so
//! `d²(x, mu) = ‖Lᵀ(x − mu)‖²`, which is non-negative by construction and
//! exactly zero when `x == mu`.

use nalgebra::{linalg::Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::codec::{put_f64, put_u32, ByteReader};
use crate::error::{FenecError, Result};

pub const FCOV_MAGIC: &[u8; 4] = b"FCOV";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Mahalanobis,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub repetitions: u8,
}

impl ShrinkageParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0 && self.gamma1.is_finite()) {
            return Err(FenecError::Config(format!(
                "gamma1 must be non-negative, got {}",
                self.gamma1
            )));
        }
        if !(self.gamma2 >= 0.0 && self.gamma2.is_finite()) {
            return Err(FenecError::Config(format!(
                "gamma2 must be non-negative, got {}",
                self.gamma2
            )));
        }
        if !matches!(self.repetitions, 1 | 2) {
            return Err(FenecError::Config(format!(
                "shrink repetitions must be 1 or 2, got {}",
                self.repetitions
            )));
        }
        Ok(())
    }
}

/// Sample covariance with the (n − 1) denominator.
pub fn estimate_covariance(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, f) = x.shape();
    if n < 2 {
        return Err(FenecError::InsufficientData {
            class_id: None,
            samples: n,
            needed: 2,
        });
    }
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut cov = centered.tr_mul(&centered);
    cov /= (n - 1) as f64;
    for j in 0..f {
        for i in (j + 1)..f {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok(cov)
}

/// Adds `gamma1 * mean(diag)` to the diagonal and `gamma2 * mean(off-diag)`
/// to every off-diagonal entry, `repetitions` times. Each pass recomputes
/// the means from the matrix produced by the previous pass.
pub fn shrink(sigma: &DMatrix<f64>, params: &ShrinkageParams) -> Result<DMatrix<f64>> {
    if !sigma.is_square() {
        return Err(FenecError::Shape(format!(
            "covariance must be square, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let f = sigma.nrows();
    let mut out = sigma.clone();
    for _ in 0..params.repetitions {
        let trace = out.trace();
        let diag_mean = trace / f as f64;
        // undefined for a 1x1 matrix; contributes nothing
        let off_mean = if f > 1 {
            (out.sum() - trace) / (f * f - f) as f64
        } else {
            0.0
        };
        let diag_add = params.gamma1 * diag_mean;
        let off_add = params.gamma2 * off_mean;
        for j in 0..f {
            for i in 0..f {
                out[(i, j)] += if i == j { diag_add } else { off_add };
            }
        }
    }
    Ok(out)
}

/// Correlation-style normalization: `s(i,j) / sqrt(s(i,i) * s(j,j))`.
pub fn normalize(sigma_s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sigma_s.is_square() {
        return Err(FenecError::Shape(
            "normalize expects a square matrix".into(),
        ));
    }
    let f = sigma_s.nrows();
    for i in 0..f {
        let d = sigma_s[(i, i)];
        if !(d > 0.0 && d.is_finite()) {
            return Err(FenecError::Normalization(format!(
                "diagonal entry {i} is {d}; shrinkage with gamma1 > 0 is required"
            )));
        }
    }
    let mut out = DMatrix::zeros(f, f);
    for j in 0..f {
        out[(j, j)] = 1.0;
        for i in (j + 1)..f {
            let v = sigma_s[(i, j)] / (sigma_s[(i, i)] * sigma_s[(j, j)]).sqrt();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Lower Cholesky factor of a symmetric matrix (only the lower triangle is read).
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(FenecError::Shape("cholesky expects a square matrix".into()));
    }
    let n = a.nrows();
    let mut l = a.lower_triangle();
    let data = l.as_mut_slice();
    // column-major: entry (i, j) lives at j * n + i
    for j in 0..n {
        let pivot = data[j * n + j];
        if !(pivot > 0.0 && pivot.is_finite()) {
            return Err(FenecError::Conditioning { pivot: j });
        }
        let root = pivot.sqrt();
        data[j * n + j] = root;
        for i in (j + 1)..n {
            data[j * n + i] /= root;
        }
        for k in (j + 1)..n {
            let l_kj = data[j * n + k];
            if l_kj == 0.0 {
                continue;
            }
            let (head, tail) = data.split_at_mut(k * n);
            let col_j = &head[j * n + k..j * n + n];
            let col_k = &mut tail[k..n];
            for (dst, &src) in col_k.iter_mut().zip(col_j) {
                *dst -= src * l_kj;
            }
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor; the result is symmetrized by averaging with its transpose.
pub fn invert_spd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky_lower(sigma)?;
    let inv = Cholesky::<f64, Dyn>::pack_dirty(l).inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Full covariance pipeline for one class: estimate, shrink, normalize.
pub fn shrunk_correlation(x: &DMatrix<f64>, params: &ShrinkageParams) -> Result<DMatrix<f64>> {
    normalize(&shrink(&estimate_covariance(x)?, params)?)
}

/// Stored per-class distance state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCovariance {
    class_id: u32,
    metric: DistanceMetric,
    precision: DMatrix<f64>,
    /// Lower Cholesky factor of `precision`; `None` for the Euclidean metric.
    factor: Option<DMatrix<f64>>,
}

impl ClassCovariance {
    /// Runs the covariance pipeline on one class's (preprocessed) features.
    pub fn fit(
        class_id: u32,
        x: &DMatrix<f64>,
        params: &ShrinkageParams,
        metric: DistanceMetric,
    ) -> Result<Self> {
        match metric {
            DistanceMetric::Euclidean => Ok(Self::euclidean(class_id, x.ncols())),
            DistanceMetric::Mahalanobis => {
                let sigma = shrunk_correlation(x, params).map_err(|e| with_class(e, class_id))?;
                let precision = invert_spd(&sigma)?;
                Self::from_precision(class_id, precision, metric)
            }
        }
    }

    pub fn euclidean(class_id: u32, n_features: usize) -> Self {
        Self {
            class_id,
            metric: DistanceMetric::Euclidean,
            precision: DMatrix::identity(n_features, n_features),
            factor: None,
        }
    }

    /// Validates a precision matrix (symmetric, positive definite) and
    /// prepares its distance factor.
    pub fn from_precision(
        class_id: u32,
        precision: DMatrix<f64>,
        metric: DistanceMetric,
    ) -> Result<Self> {
        if !precision.is_square() || precision.nrows() == 0 {
            return Err(FenecError::Shape(format!(
                "precision must be a non-empty square matrix, got {}x{}",
                precision.nrows(),
                precision.ncols()
            )));
        }
        let f = precision.nrows();
        if metric == DistanceMetric::Euclidean {
            if precision != DMatrix::identity(f, f) {
                return Err(FenecError::Data(
                    "euclidean metric requires an identity precision".into(),
                ));
            }
            return Ok(Self::euclidean(class_id, f));
        }
        for j in 0..f {
            for i in (j + 1)..f {
                let (a, b) = (precision[(i, j)], precision[(j, i)]);
                if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                    return Err(FenecError::Data(format!(
                        "precision of class {class_id} is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let factor = cholesky_lower(&precision)?;
        Ok(Self {
            class_id,
            metric,
            precision,
            factor: Some(factor),
        })
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn n_features(&self) -> usize {
        self.precision.nrows()
    }

    /// Maps `x` to `Lᵀ x`, so squared distances become squared Euclidean norms.
    pub fn whiten(&self, x: &[f64]) -> Vec<f64> {
        match &self.factor {
            None => x.to_vec(),
            Some(l) => {
                let n = l.nrows();
                let data = l.as_slice();
                (0..n)
                    .map(|i| {
                        data[i * n + i..i * n + n]
                            .iter()
                            .zip(&x[i..])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect()
            }
        }
    }

    /// Squared distance of every row of `queries` to `mu`.
    pub fn squared_distances(&self, queries: &DMatrix<f64>, mu: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(queries.ncols())?;
        self.check_dim(mu.len())?;
        let mu_w = self.whiten(mu);
        let qt = queries.transpose();
        Ok(qt
            .column_iter()
            .map(|q| squared_euclidean(&self.whiten(q.as_slice()), &mu_w))
            .collect())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.n_features() {
            return Err(FenecError::Shape(format!(
                "vector of length {len} against a {}-dimensional class model",
                self.n_features()
            )));
        }
        Ok(())
    }

    pub(crate) fn write_section(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(FCOV_MAGIC);
        put_u32(out, self.class_id);
        put_u32(out, self.n_features() as u32);
        for i in 0..self.n_features() {
            for j in 0..self.n_features() {
                put_f64(out, self.precision[(i, j)]);
            }
        }
    }

    pub(crate) fn read_section(
        reader: &mut ByteReader<'_>,
        metric: DistanceMetric,
    ) -> Result<Self> {
        reader.expect_magic(FCOV_MAGIC)?;
        let class_id = reader.u32("FCOV class id")?;
        let f = reader.u32("FCOV n_features")? as usize;
        let values = reader.f64_vec(f * f, "FCOV precision")?;
        let precision = DMatrix::from_row_slice(f, f, &values);
        Self::from_precision(class_id, precision, metric)
    }
}

/// `(x − mu)ᵀ P (x − mu)` evaluated directly from the precision matrix.
pub fn squared_distance(x: &[f64], mu: &[f64], cov: &ClassCovariance) -> Result<f64> {
    cov.check_dim(x.len())?;
    cov.check_dim(mu.len())?;
    let diff = nalgebra::DVector::from_iterator(x.len(), x.iter().zip(mu).map(|(a, b)| a - b));
    Ok(diff.dot(&(cov.precision() * &diff)))
}

pub(crate) fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn with_class(err: FenecError, class_id: u32) -> FenecError {
    match err {
        FenecError::InsufficientData {
            samples, needed, ..
        } => FenecError::InsufficientData {
            class_id: Some(class_id),
            samples,
            needed,
        },
        FenecError::Normalization(m) => FenecError::Normalization(format!("class {class_id}: {m}")),
        other => other,
    }
}
