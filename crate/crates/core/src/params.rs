use serde::{Deserialize, Serialize};

use crate::covariance::{DistanceMetric, ShrinkageParams};
use crate::error::{FenecError, Result};
use crate::preprocessing::PreprocessConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Weighted kNN over all stored centroids.
    Fenec,
    /// Log-likelihood logits with a shared trainable `(a, b)` head.
    FenecLog,
}

fn default_repetitions() -> u8 {
    1
}

/// Classifier hyperparameters. `n_neighbors_or_points` is `N_neighbors` for
/// [`Method::Fenec`] and `N_points` for [`Method::FenecLog`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub method: Method,
    pub n_clusters: usize,
    pub n_neighbors_or_points: usize,
    #[serde(default)]
    pub tukey_lambda: Option<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(default = "default_repetitions")]
    pub shrink_repetitions: u8,
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default)]
    pub sample_normalize: bool,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(FenecError::Config("n_clusters must be at least 1".into()));
        }
        if self.n_neighbors_or_points == 0 {
            return Err(FenecError::Config(
                "n_neighbors_or_points must be at least 1".into(),
            ));
        }
        self.preprocess().validate()?;
        self.shrinkage().validate()?;
        match (self.method, self.learning_rate) {
            (Method::FenecLog, None) => Err(FenecError::Config(
                "fenec_log requires learning_rate".into(),
            )),
            (Method::FenecLog, Some(lr)) if !(lr > 0.0 && lr.is_finite()) => Err(
                FenecError::Config(format!("learning_rate must be positive, got {lr}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            tukey_lambda: self.tukey_lambda,
            sample_normalize: self.sample_normalize,
        }
    }

    pub fn shrinkage(&self) -> ShrinkageParams {
        ShrinkageParams {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            repetitions: self.shrink_repetitions,
        }
    }

    /// Stored parameter count for `n_classes` classes of dimension `n_features`:
    /// one precision matrix and `n_clusters` centroids per class, plus the two
    /// head scalars for FeNeC-Log.
    pub fn parameter_count(&self, n_classes: usize, n_features: usize) -> usize {
        let stats = n_classes * n_features * (self.n_clusters + n_features);
        match self.method {
            Method::Fenec => stats,
            Method::FenecLog => stats + 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vit_cifar_fenec() -> HyperParams {
        HyperParams {
            method: Method::Fenec,
            n_clusters: 26,
            n_neighbors_or_points: 1,
            tukey_lambda: None,
            gamma1: 6.12,
            gamma2: 8.10,
            shrink_repetitions: 1,
            metric: DistanceMetric::Mahalanobis,
            sample_normalize: false,
            learning_rate: None,
        }
    }

    #[test]
    fn parameter_count_formula() {
        let h = vit_cifar_fenec();
        assert_eq!(h.parameter_count(100, 768), 100 * 768 * (26 + 768));
        let log = HyperParams {
            method: Method::FenecLog,
            learning_rate: Some(0.00333),
            ..h
        };
        assert_eq!(log.parameter_count(100, 768), 100 * 768 * (26 + 768) + 2);
    }

    #[test]
    fn validation() {
        vit_cifar_fenec().validate().unwrap();
        let log = HyperParams {
            method: Method::FenecLog,
            ..vit_cifar_fenec()
        };
        assert!(matches!(log.validate(), Err(FenecError::Config(_))));
        assert!(HyperParams {
            n_neighbors_or_points: 0,
            ..vit_cifar_fenec()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"method":"fenec","n_clusters":1,"n_neighbors_or_points":1,
                       "gamma1":1.0,"gama2":1.0}"#;
        let err = serde_json::from_str::<HyperParams>(json).unwrap_err();
        assert!(err.to_string().contains("gama2"));
    }
}
