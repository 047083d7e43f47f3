use covloc::covgen::CovGenError;
use covloc::{CovModelError, FusionError, IcpError, LieError, MetricsError, PointCloudError};
use thiserror::Error;

/// A command failure, classified by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    #[error("{0}")]
    Usage(String),
    /// Missing, unreadable or inconsistent input data (exit 2).
    #[error("{0}")]
    Data(String),
    /// A numerical failure inside the pipeline (exit 3).
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<LieError> for CliError {
    fn from(e: LieError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<PointCloudError> for CliError {
    fn from(e: PointCloudError) -> Self {
        match e {
            PointCloudError::InvalidVoxelSize(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<IcpError> for CliError {
    fn from(e: IcpError) -> Self {
        match e {
            IcpError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            IcpError::NoCorrespondences { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CovGenError> for CliError {
    fn from(e: CovGenError) -> Self {
        match e {
            CovGenError::InvalidSampleCount(_) | CovGenError::InvalidSpec => CliError::Usage(e.to_string()),
            CovGenError::TooFewValidSamples { .. } => CliError::Numeric(e.to_string()),
            CovGenError::PointCloud(e) => e.into(),
            CovGenError::Icp(e) => e.into(),
            CovGenError::Lie(e) => e.into(),
            CovGenError::Io { .. } | CovGenError::Malformed { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<CovModelError> for CliError {
    fn from(e: CovModelError) -> Self {
        match e {
            CovModelError::NotPositiveDefinite | CovModelError::NonFiniteGradient { .. } => {
                CliError::Numeric(e.to_string())
            }
            CovModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            CovModelError::PointCloud(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::InvalidConfig(_) | FusionError::UnknownMode(_) => CliError::Usage(e.to_string()),
            FusionError::Lie(e) => e.into(),
            FusionError::PointCloud(e) => e.into(),
            FusionError::Icp(e) => e.into(),
            FusionError::Model(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}
