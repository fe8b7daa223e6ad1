//! Tukey power transform and per-sample L2 normalization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FenecError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub tukey_lambda: Option<f64>,
    pub sample_normalize: bool,
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        match self.tukey_lambda {
            Some(l) if !(l > 0.0 && l.is_finite()) => Err(FenecError::Config(format!(
                "tukey_lambda must be positive, got {l}"
            ))),
            _ => Ok(()),
        }
    }

    /// Tukey transform (if configured) followed by row normalization (if enabled).
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x = match self.tukey_lambda {
            Some(lambda) => tukey_transform(x, lambda)?,
            None => x.clone(),
        };
        if self.sample_normalize {
            sample_normalize(&x)
        } else {
            Ok(x)
        }
    }
}

/// Elementwise `x^lambda`. Only defined for non-negative inputs.
pub fn tukey_transform(x: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(FenecError::Domain(format!(
            "tukey lambda must be positive, got {lambda}"
        )));
    }
    if let Some(v) = x.iter().find(|v| **v < 0.0) {
        return Err(FenecError::Domain(format!(
            "tukey transform requires non-negative features, found {v}"
        )));
    }
    if lambda == 1.0 {
        return Ok(x.clone());
    }
    Ok(x.map(|v| v.powf(lambda)))
}

/// Rescales every row to unit Euclidean norm.
pub fn sample_normalize(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let norm = row.norm();
        if norm == 0.0 {
            return Err(FenecError::Normalization(format!(
                "row {i} is all zeros and cannot be normalized"
            )));
        }
        row /= norm;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn square_root_case() {
        let x = DMatrix::from_row_slice(1, 2, &[4.0, 9.0]);
        let y = tukey_transform(&x, 0.5).unwrap();
        assert_eq!(y.as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn lambda_one_is_identity() {
        let x = DMatrix::from_row_slice(2, 2, &[0.3, 1.7, 0.0, 12.5]);
        assert_eq!(tukey_transform(&x, 1.0).unwrap(), x);
    }

    #[test]
    fn negative_entry_rejected() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, -0.1]);
        assert!(matches!(
            tukey_transform(&x, 0.38),
            Err(FenecError::Domain(_))
        ));
    }

    #[test]
    fn best_resnet_lambda_accepted() {
        let cfg = PreprocessConfig {
            tukey_lambda: Some(0.38),
            sample_normalize: true,
        };
        cfg.validate().unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[0.1, 2.0, 0.0, 5.0, 0.5, 0.2]);
        let y = cfg.apply(&x).unwrap();
        for row in y.row_iter() {
            assert_relative_eq!(row.norm(), 1.0, epsilon = 1e-12);
        }
        assert!(PreprocessConfig {
            tukey_lambda: Some(0.0),
            sample_normalize: false
        }
        .validate()
        .is_err());
    }

    #[test]
    fn three_four_five() {
        let x = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let y = sample_normalize(&x).unwrap();
        assert_relative_eq!(y[(0, 0)], 0.6, epsilon = 1e-15);
        assert_relative_eq!(y[(0, 1)], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn unit_row_unchanged() {
        let x = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
        assert_eq!(sample_normalize(&x).unwrap(), x);
    }

    #[test]
    fn zero_row_rejected() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            sample_normalize(&x),
            Err(FenecError::Normalization(_))
        ));
    }

    #[test]
    fn random_rows_have_unit_norm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(10, 5, |_, _| rng.random_range(-3.0..3.0));
        let y = sample_normalize(&x).unwrap();
        for i in 0..10 {
            let norm: f64 = (0..5).map(|j| y[(i, j)] * y[(i, j)]).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    fn non_negative_matrix() -> impl Strategy<Value = DMatrix<f64>> {
        (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
            proptest::collection::vec(0.0f64..50.0, r * c)
                .prop_map(move |v| DMatrix::from_vec(r, c, v))
        })
    }

    proptest! {
        #[test]
        fn tukey_is_monotone(a in 0.0f64..100.0, b in 0.0f64..100.0, lambda in 0.05f64..3.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let t = tukey_transform(&DMatrix::from_row_slice(1, 2, &[lo, hi]), lambda).unwrap();
            prop_assert!(t[(0, 0)] <= t[(0, 1)]);
        }

        #[test]
        fn tukey_composes(x in non_negative_matrix(), a in 0.1f64..2.0, b in 0.1f64..2.0) {
            let twice = tukey_transform(&tukey_transform(&x, a).unwrap(), b).unwrap();
            let once = tukey_transform(&x, a * b).unwrap();
            for (u, v) in twice.iter().zip(once.iter()) {
                prop_assert!((u - v).abs() <= 1e-9 * v.abs().max(1.0));
            }
        }

        #[test]
        fn normalize_idempotent(x in non_negative_matrix().prop_map(|m| m.add_scalar(0.01))) {
            let once = sample_normalize(&x).unwrap();
            let twice = sample_normalize(&once).unwrap();
            for (u, v) in once.iter().zip(twice.iter()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
