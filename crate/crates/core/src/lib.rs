//! Localization error covariance for LiDAR map matching: SE(3) tools, point
//! clouds and ICP, Monte-Carlo covariance labels, a Cholesky-head covariance
//! regressor, and EKF fusion on the SE(3) tangent space.

pub mod covgen;
pub mod covmodel;
pub mod fusion;
pub mod icp;
pub mod lie;
pub mod metrics;
pub mod pointcloud;
pub mod rng;
pub mod synth;

pub use covgen::{CovGenError, CovRecord, Dataset, GenerateConfig, PerturbationSpec};
pub use covmodel::{CovModelError, RegressionModel, TrainConfig};
pub use fusion::{FusionConfig, FusionError, FusionMode, Trajectory};
pub use icp::{Aligner, IcpConfig, IcpError, IcpResult, IcpTarget, PointToPlane};
pub use lie::{Cov6, LieError, SE3Transform, Twist};
pub use metrics::{EvalReport, MetricsError};
pub use pointcloud::{InMemorySequence, KittiSequence, MapWindow, PointCloud, PointCloudError, SequenceSource};
pub use synth::{make_synthetic_scene, SceneKind, SynthConfig};
