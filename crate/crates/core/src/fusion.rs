//! Tangent-space EKF on SE(3) fusing noisy odometry with ICP pose fixes.
//!
//! Errors live in the body frame: a state `(T, P)` stands for
//! `T·exp(e)` with `e ~ N(0, P)`.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix6, Vector6};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::covmodel::{predict, CovModelError, RegressionModel};
use crate::icp::{AlignContext, Aligner, IcpConfig, IcpError, IcpTarget};
use crate::lie::{Cov6, LieError, SE3Transform, Twist};
use crate::pointcloud::{
    build_local_map, format_pose_row, pose_from_row_major, voxel_downsample, MapWindow,
    PointCloud, PointCloudError, SequenceSource, DEFAULT_MAP_VOXEL, DEFAULT_NORMAL_K,
    DEFAULT_SCAN_VOXEL,
};
use crate::rng::rng_for;

/// Added to a measurement covariance that is not positive definite.
pub const MEASUREMENT_JITTER: f64 = 1e-12;

const ODOMETRY_STREAM: u64 = 0x0D0;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("trajectories cover different frames")]
    FrameMismatch,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("frame ids must be strictly increasing (saw {0} after {1})")]
    NonIncreasingFrames(usize, usize),
    #[error("predicted_cov mode needs a model")]
    MissingModel,
    #[error("fixed_cov mode needs a covariance dataset")]
    MissingFixedCovariance,
    #[error("unknown fusion mode `{0}`")]
    UnknownMode(String),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("malformed trajectory line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Icp(#[from] IcpError),
    #[error(transparent)]
    Model(#[from] CovModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub pose: SE3Transform,
    pub covariance: Cov6,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionInput {
    pub delta: SE3Transform,
    pub process_noise: Cov6,
}

pub fn ekf_predict(state: &FusionState, input: &MotionInput) -> FusionState {
    let a = input.delta.inverse().adjoint();
    let p = a * state.covariance.matrix() * a.transpose() + input.process_noise.matrix();
    FusionState {
        pose: state.pose.compose(&input.delta),
        covariance: Cov6::symmetrized(p).expect("congruence plus PSD noise stays PSD"),
    }
}

/// Direct pose measurement (identity Jacobian) with Joseph-form covariance.
pub fn ekf_update(
    state: &FusionState,
    measurement: &SE3Transform,
    r_meas: &Cov6,
) -> Result<FusionState, FusionError> {
    let r = if r_meas.matrix().cholesky().is_some() {
        *r_meas.matrix()
    } else {
        r_meas.matrix() + Matrix6::identity() * MEASUREMENT_JITTER
    };
    let p = state.covariance.matrix();
    let nu = state.pose.inverse().compose(measurement).log()?;
    let s = p + r;
    let s_chol = s.cholesky().ok_or_else(|| {
        LieError::NotPositiveSemiDefinite(Cov6::symmetrized(s).map_or(f64::NAN, |c| c.min_eigenvalue()))
    })?;
    // K = P S⁻¹ with both symmetric, so K = (S⁻¹ P)ᵀ.
    let k = s_chol.solve(p).transpose();
    let step = Twist::from_vector(k * nu.as_vector())?;
    let i_k = Matrix6::identity() - k;
    let joseph = i_k * p * i_k.transpose() + k * r * k.transpose();
    Ok(FusionState {
        pose: state.pose.compose(&step.exp()),
        covariance: Cov6::symmetrized(joseph)?,
    })
}

/// Poses keyed by strictly increasing frame id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(usize, SE3Transform)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(usize, SE3Transform)>) -> Result<Self, FusionError> {
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(FusionError::NonIncreasingFrames(w[1].0, w[0].0));
            }
        }
        Ok(Trajectory { entries })
    }

    pub fn push(&mut self, frame_id: usize, pose: SE3Transform) -> Result<(), FusionError> {
        if let Some(&(last, _)) = self.entries.last() {
            if frame_id <= last {
                return Err(FusionError::NonIncreasingFrames(frame_id, last));
            }
        }
        self.entries.push((frame_id, pose));
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, SE3Transform)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ground truth of `frames` taken from a sequence.
    pub fn from_sequence(seq: &dyn SequenceSource, frames: &[usize]) -> Result<Self, FusionError> {
        let entries = frames
            .iter()
            .map(|&f| Ok((f, seq.pose(f).ok_or(PointCloudError::MissingPose(f))?)))
            .collect::<Result<Vec<_>, FusionError>>()?;
        Trajectory::new(entries)
    }

    /// One line per frame: the id, then the 12 row-major `[R|t]` values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (f, pose) in &self.entries {
            let _ = writeln!(s, "{f} {}", format_pose_row(pose));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, FusionError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = |reason: String| FusionError::Malformed { line: i + 1, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 13 {
                return Err(malformed(format!("expected 13 fields, found {}", fields.len())));
            }
            let frame = fields[0]
                .parse::<usize>()
                .map_err(|e| malformed(e.to_string()))?;
            let mut values = [0.0; 12];
            for (v, f) in values.iter_mut().zip(&fields[1..]) {
                *v = f.parse().map_err(|e: std::num::ParseFloatError| malformed(e.to_string()))?;
            }
            entries.push((frame, pose_from_row_major(&values)?));
        }
        Trajectory::new(entries)
    }

    pub fn write(&self, path: &Path) -> Result<(), FusionError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, FusionError> {
        Trajectory::from_text(&fs::read_to_string(path)?)
    }
}

fn translation_errors(
    estimate: &Trajectory,
    truth: &Trajectory,
) -> Result<Vec<f64>, FusionError> {
    if estimate.len() != truth.len() {
        return Err(FusionError::FrameMismatch);
    }
    estimate
        .entries
        .iter()
        .zip(&truth.entries)
        .map(|((fa, a), (fb, b))| {
            if fa != fb {
                return Err(FusionError::FrameMismatch);
            }
            Ok((a.translation() - b.translation()).norm())
        })
        .collect()
}

/// Average displacement error in meters; zero for two empty trajectories.
pub fn ade(estimate: &Trajectory, truth: &Trajectory) -> Result<f64, FusionError> {
    let e = translation_errors(estimate, truth)?;
    if e.is_empty() {
        return Ok(0.0);
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Final displacement error in meters.
pub fn fde(estimate: &Trajectory, truth: &Trajectory) -> Result<f64, FusionError> {
    translation_errors(estimate, truth)?
        .last()
        .copied()
        .ok_or(FusionError::EmptyTrajectory)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    IcpOnly,
    FixedCov,
    PredictedCov,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::IcpOnly, FusionMode::FixedCov, FusionMode::PredictedCov];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::IcpOnly => "icp_only",
            FusionMode::FixedCov => "fixed_cov",
            FusionMode::PredictedCov => "predicted_cov",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FusionError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Per-step odometry noise, `(u_x, u_y, u_z)` in m then `(ω_x, ω_y, ω_z)` in rad.
    pub odometry_sigma: [f64; 6],
    /// Standard deviations of the initial state covariance.
    pub initial_sigma: [f64; 6],
    pub window: MapWindow,
    pub map_voxel: f64,
    pub scan_voxel: f64,
    pub normal_k: usize,
    pub icp: IcpConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            odometry_sigma: [0.02, 0.02, 0.005, 0.001, 0.001, 0.002],
            initial_sigma: [0.01, 0.01, 0.01, 0.001, 0.001, 0.001],
            window: MapWindow::default(),
            map_voxel: DEFAULT_MAP_VOXEL,
            scan_voxel: DEFAULT_SCAN_VOXEL,
            normal_k: DEFAULT_NORMAL_K,
            icp: IcpConfig::default(),
        }
    }
}

fn diag_sq(sigma: &[f64; 6]) -> Result<Cov6, FusionError> {
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(FusionError::InvalidConfig(format!("bad standard deviations {sigma:?}")));
    }
    Ok(Cov6::from_diagonal(&sigma.map(|s| s * s))?)
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        diag_sq(&self.odometry_sigma)?;
        diag_sq(&self.initial_sigma)?;
        self.icp.validate()?;
        Ok(())
    }

    pub fn process_noise(&self) -> Result<Cov6, FusionError> {
        diag_sq(&self.odometry_sigma)
    }
}

/// Per-frame inputs that do not depend on mode or seed.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub frame_id: usize,
    pub truth: SE3Transform,
    /// Full-resolution scan, the model's input.
    pub scan: PointCloud,
    /// Reduced scan aligned by ICP.
    pub source: PointCloud,
    pub target: IcpTarget,
}

/// Builds local maps and reduced scans for strictly increasing `frames`.
pub fn prepare_frames(
    seq: &dyn SequenceSource,
    frames: &[usize],
    cfg: &FusionConfig,
) -> Result<Vec<PreparedFrame>, FusionError> {
    if frames.is_empty() {
        return Err(FusionError::EmptyTrajectory);
    }
    for w in frames.windows(2) {
        if w[1] <= w[0] {
            return Err(FusionError::NonIncreasingFrames(w[1], w[0]));
        }
    }
    frames
        .par_iter()
        .map(|&f| {
            let truth = seq.pose(f).ok_or(PointCloudError::MissingPose(f))?;
            let scan = seq.scan(f)?;
            let source = voxel_downsample(&scan, cfg.scan_voxel)?;
            let map = build_local_map(seq, f, cfg.window, cfg.map_voxel, cfg.normal_k)?;
            Ok(PreparedFrame {
                frame_id: f,
                truth,
                scan,
                source,
                target: IcpTarget::new(map)?,
            })
        })
        .collect()
}

/// Measurement covariance per frame for `mode`; `None` in ICP-only mode.
pub fn measurement_covariances(
    frames: &[PreparedFrame],
    mode: FusionMode,
    fixed: Option<&Cov6>,
    model: Option<&RegressionModel>,
) -> Result<Vec<Option<Cov6>>, FusionError> {
    match mode {
        FusionMode::IcpOnly => Ok(vec![None; frames.len()]),
        FusionMode::FixedCov => {
            let c = fixed.ok_or(FusionError::MissingFixedCovariance)?;
            Ok(vec![Some(*c); frames.len()])
        }
        FusionMode::PredictedCov => {
            let m = model.ok_or(FusionError::MissingModel)?;
            frames
                .par_iter()
                .map(|f| Ok(Some(predict(m, &f.scan)?)))
                .collect()
        }
    }
}

fn odometry_noise(sigma: &[f64; 6], seed: u64, frame_id: usize) -> Result<Twist, FusionError> {
    let mut rng = rng_for(&[seed, ODOMETRY_STREAM, frame_id as u64]);
    let v = Vector6::from_fn(|i, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma[i] * z
    });
    Ok(Twist::from_vector(v)?)
}

/// Odometry readings for every step after the first frame: the true
/// relative motion right-multiplied by a sampled twist.
pub fn synthesize_motion(
    frames: &[PreparedFrame],
    cfg: &FusionConfig,
    seed: u64,
) -> Result<Vec<MotionInput>, FusionError> {
    let q = cfg.process_noise()?;
    frames
        .windows(2)
        .map(|w| {
            let truth = w[0].truth.inverse().compose(&w[1].truth);
            let noise = odometry_noise(&cfg.odometry_sigma, seed, w[1].frame_id)?;
            Ok(MotionInput {
                delta: truth.compose(&noise.exp()),
                process_noise: q,
            })
        })
        .collect()
}

/// Filters one prepared sequence. `covariances[k]` is the measurement
/// covariance for frame `k`, or `None` for raw ICP output. A failed
/// alignment skips that frame's correction.
pub fn run_filter<A: Aligner + ?Sized>(
    aligner: &A,
    frames: &[PreparedFrame],
    covariances: &[Option<Cov6>],
    cfg: &FusionConfig,
    seed: u64,
) -> Result<Trajectory, FusionError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(FusionError::EmptyTrajectory);
    }
    if covariances.len() != frames.len() {
        return Err(FusionError::FrameMismatch);
    }
    let motion = synthesize_motion(frames, cfg, seed)?;
    let mut state = FusionState {
        pose: frames[0].truth,
        covariance: diag_sq(&cfg.initial_sigma)?,
    };
    let mut out = Trajectory::default();
    out.push(frames[0].frame_id, state.pose)?;
    for (k, frame) in frames.iter().enumerate().skip(1) {
        state = ekf_predict(&state, &motion[k - 1]);
        let ctx = AlignContext {
            frame_id: frame.frame_id,
            sample: 0,
        };
        let measured = match aligner.align(ctx, &frame.source, &frame.target, &state.pose) {
            Ok(r) => Some(r.estimate),
            Err(IcpError::NoCorrespondences { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        match (&covariances[k], measured) {
            (None, Some(m)) => state.pose = m,
            (Some(r), Some(m)) => state = ekf_update(&state, &m, r)?,
            (_, None) => {}
        }
        out.push(frame.frame_id, state.pose)?;
    }
    Ok(out)
}

/// End-to-end run of one mode. `fixed` is the dataset-average covariance.
#[allow(clippy::too_many_arguments)]
pub fn run_fusion<A: Aligner + ?Sized>(
    aligner: &A,
    seq: &dyn SequenceSource,
    frames: &[usize],
    mode: FusionMode,
    fixed: Option<&Cov6>,
    model: Option<&RegressionModel>,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<Trajectory, FusionError> {
    let prepared = prepare_frames(seq, frames, cfg)?;
    let covs = measurement_covariances(&prepared, mode, fixed, model)?;
    run_filter(aligner, &prepared, &covs, cfg, seed)
}
