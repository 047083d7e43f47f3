//! Covariance predictor: fixed scan features, a small regression network
//! with a Cholesky output head, the KL + Huber loss, and training.

mod cholesky;
mod features;
mod loss;
mod network;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::pointcloud::PointCloudError;

pub use cholesky::{params_to_cov, sigmoid, softplus, CholeskyParams, DIAGONAL_FLOOR, LOWER_ENTRIES, RAW_DIM};
pub use features::{
    extract_features, feature_spec_hash, FeatureVector, FEATURE_DIM, HISTOGRAM_BINS, HISTOGRAM_OFFSET,
};
pub use loss::{
    loss_and_grad_raw, loss_combined, loss_huber, loss_kl, regularize_label, LossWeights,
    LABEL_JITTER, LABEL_MIN_EIGENVALUE,
};
pub use network::{predict, ModelGrad, RegressionModel, HIDDEN_DIM};
pub use train::{
    augment_sample, initial_model, train, weighted_sample, AugmentConfig, TrainConfig, TrainOutcome,
    TrainSample,
};

#[derive(Debug, Error)]
pub enum CovModelError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("model was trained with a different feature layout")]
    FeatureMismatch,
    #[error("malformed model file, line {line}: {reason}")]
    MalformedModel { line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
}

impl CovModelError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CovModelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
