//! Monte-Carlo ground-truth covariance labels: perturb the reference pose,
//! re-run ICP, and take the sample second moment of the error twists.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix6, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::icp::{AlignContext, Aligner, IcpConfig, IcpError, IcpTarget, PointToPlane};
use crate::lie::{Cov6, LieError, SE3Transform, Twist};
use crate::pointcloud::{
    build_local_map, voxel_downsample, MapWindow, PointCloud, PointCloudError, SequenceSource,
    DEFAULT_MAP_VOXEL, DEFAULT_NORMAL_K, DEFAULT_SCAN_VOXEL,
};
use crate::rng::rng_for;

pub const DATASET_FORMAT: &str = "covloc-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CovGenError {
    #[error("frame {frame_id}: only {valid} valid samples ({diverged} diverged), need at least 2")]
    TooFewValidSamples {
        frame_id: usize,
        valid: usize,
        diverged: usize,
    },
    #[error("sample count must be at least 2, got {0}")]
    InvalidSampleCount(usize),
    #[error("perturbation sigmas must be finite and non-negative")]
    InvalidSpec,
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Icp(#[from] IcpError),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset {path}, line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CovGenError + '_ {
    move |source| CovGenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Diagonal of the perturbation covariance. Rotational sigmas are degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
    pub sigma_phi: f64,
    pub sigma_theta: f64,
    pub sigma_psi: f64,
}

impl Default for PerturbationSpec {
    /// 1 m per axis and 5° per rotation axis.
    fn default() -> Self {
        PerturbationSpec {
            sigma_x: 1.0,
            sigma_y: 1.0,
            sigma_z: 1.0,
            sigma_phi: 5.0,
            sigma_theta: 5.0,
            sigma_psi: 5.0,
        }
    }
}

impl PerturbationSpec {
    pub fn zero() -> Self {
        PerturbationSpec {
            sigma_x: 0.0,
            sigma_y: 0.0,
            sigma_z: 0.0,
            sigma_phi: 0.0,
            sigma_theta: 0.0,
            sigma_psi: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CovGenError> {
        let s = [
            self.sigma_x,
            self.sigma_y,
            self.sigma_z,
            self.sigma_phi,
            self.sigma_theta,
            self.sigma_psi,
        ];
        if s.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(CovGenError::InvalidSpec)
        }
    }

    /// Standard deviations in twist units (m, m, m, rad, rad, rad).
    pub fn twist_sigmas(&self) -> Vector6<f64> {
        Vector6::new(
            self.sigma_x,
            self.sigma_y,
            self.sigma_z,
            self.sigma_phi.to_radians(),
            self.sigma_theta.to_radians(),
            self.sigma_psi.to_radians(),
        )
    }
}

/// Draws `ξ ~ N(0, diag(σ²))`. Draws with `‖ω‖ ≥ π` are redrawn, which
/// only matters for rotational sigmas far beyond any practical setting.
pub fn sample_perturbation(spec: &PerturbationSpec, rng: &mut impl Rng) -> Twist {
    let sigma = spec.twist_sigmas();
    loop {
        let z = Vector6::from_fn(|i, _| sigma[i] * rng.sample::<f64, _>(StandardNormal));
        if let Ok(t) = Twist::from_vector(z) {
            return t;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovRecord {
    pub frame_id: usize,
    /// Valid samples behind the covariance.
    pub n: usize,
    pub diverged_count: usize,
    pub covariance: Cov6,
    /// Mean error twist, kept as auxiliary metadata.
    pub mean: Vector6<f64>,
    pub seed: u64,
}

/// Monte-Carlo run for one frame using an arbitrary aligner.
///
/// Sample `i` draws its perturbation from a stream keyed by
/// `(seed, frame_id, i)`. The covariance is the uncentered second moment
/// `Σ ξᵢξᵢᵀ / (n_valid − 1)`. Samples whose ICP finds no correspondences or
/// whose error has a rotation too close to π are dropped and counted.
#[allow(clippy::too_many_arguments)]
pub fn run_monte_carlo_with<A: Aligner + ?Sized>(
    aligner: &A,
    frame_id: usize,
    scan: &PointCloud,
    target: &IcpTarget,
    t_bar: &SE3Transform,
    spec: &PerturbationSpec,
    n: usize,
    seed: u64,
) -> Result<CovRecord, CovGenError> {
    if n < 2 {
        return Err(CovGenError::InvalidSampleCount(n));
    }
    spec.validate()?;
    let t_bar_inv = t_bar.inverse();
    let samples: Vec<Option<Vector6<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(&[seed, frame_id as u64, i as u64]);
            let xi = sample_perturbation(spec, &mut rng);
            let init = xi.exp().compose(t_bar);
            let ctx = AlignContext { frame_id, sample: i };
            let est = match aligner.align(ctx, scan, target, &init) {
                Ok(r) => r.estimate,
                Err(IcpError::NoCorrespondences { .. }) => return Ok(None),
                Err(e) => return Err(CovGenError::from(e)),
            };
            match t_bar_inv.compose(&est).log() {
                Ok(err) => Ok(Some(*err.as_vector())),
                Err(LieError::AngleNearPi { .. }) => Ok(None),
                Err(e) => Err(e.into()),
            }
        })
        .collect::<Result<_, CovGenError>>()?;

    let mut sum = Matrix6::zeros();
    let mut mean = Vector6::zeros();
    let mut valid = 0usize;
    for xi in samples.iter().flatten() {
        sum += xi * xi.transpose();
        mean += xi;
        valid += 1;
    }
    let diverged = n - valid;
    if valid < 2 {
        return Err(CovGenError::TooFewValidSamples {
            frame_id,
            valid,
            diverged,
        });
    }
    let covariance = Cov6::symmetrized(sum / (valid - 1) as f64)?;
    Ok(CovRecord {
        frame_id,
        n: valid,
        diverged_count: diverged,
        covariance,
        mean: mean / valid as f64,
        seed,
    })
}

/// Monte-Carlo run with point-to-plane ICP against a normal-equipped map.
#[allow(clippy::too_many_arguments)]
pub fn run_monte_carlo(
    frame_id: usize,
    scan: &PointCloud,
    map: PointCloud,
    t_bar: &SE3Transform,
    spec: &PerturbationSpec,
    n: usize,
    cfg: &IcpConfig,
    seed: u64,
) -> Result<CovRecord, CovGenError> {
    let target = IcpTarget::new(map)?;
    run_monte_carlo_with(&PointToPlane(*cfg), frame_id, scan, &target, t_bar, spec, n, seed)
}

/// Everything that determines a generated dataset besides the input data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub spec: PerturbationSpec,
    pub n: usize,
    pub window: MapWindow,
    pub map_voxel: f64,
    pub scan_voxel: f64,
    pub normal_k: usize,
    pub icp: IcpConfig,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            spec: PerturbationSpec::default(),
            n: 200,
            window: MapWindow::default(),
            map_voxel: DEFAULT_MAP_VOXEL,
            scan_voxel: DEFAULT_SCAN_VOXEL,
            normal_k: DEFAULT_NORMAL_K,
            icp: IcpConfig::default(),
            seed: 0,
        }
    }
}

impl GenerateConfig {
    /// Sidecar metadata, in a fixed key order.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let s = &self.spec;
        let i = &self.icp;
        [
            ("sigma_x", s.sigma_x.to_string()),
            ("sigma_y", s.sigma_y.to_string()),
            ("sigma_z", s.sigma_z.to_string()),
            ("sigma_phi_deg", s.sigma_phi.to_string()),
            ("sigma_theta_deg", s.sigma_theta.to_string()),
            ("sigma_psi_deg", s.sigma_psi.to_string()),
            ("n", self.n.to_string()),
            ("window_before", self.window.before.to_string()),
            ("window_after", self.window.after.to_string()),
            ("map_voxel", self.map_voxel.to_string()),
            ("scan_voxel", self.scan_voxel.to_string()),
            ("normal_k", self.normal_k.to_string()),
            ("icp_max_iterations", i.max_iterations.to_string()),
            ("icp_translation_eps", i.translation_eps.to_string()),
            ("icp_rotation_eps", i.rotation_eps.to_string()),
            ("icp_max_correspondence_distance", i.max_correspondence_distance.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Outcome of one frame during dataset generation.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    Record(CovRecord),
    Skipped { frame_id: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub metadata: Vec<(String, String)>,
    pub records: Vec<CovRecord>,
    /// Frames for which no label could be produced.
    pub skipped: Vec<(usize, String)>,
}

impl Dataset {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn total_diverged(&self) -> usize {
        self.records.iter().map(|r| r.diverged_count).sum()
    }

    /// Arithmetic mean of all record covariances.
    pub fn mean_covariance(&self) -> Option<Cov6> {
        if self.records.is_empty() {
            return None;
        }
        let sum: Matrix6<f64> = self.records.iter().map(|r| r.covariance.matrix()).sum();
        Cov6::symmetrized(sum / self.records.len() as f64).ok()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{DATASET_FORMAT},{DATASET_VERSION}\n");
        let meta: Vec<String> = self.metadata.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.push_str(&meta.join(","));
        out.push('\n');
        let mut skipped = self.skipped.iter().peekable();
        for r in &self.records {
            while let Some((f, reason)) = skipped.next_if(|(f, _)| *f < r.frame_id) {
                let _ = writeln!(out, "# skipped frame {f}: {reason}");
            }
            let _ = write!(out, "{},{},{}", r.frame_id, r.n, r.diverged_count);
            for v in r.covariance.upper_triangle().iter().chain(r.mean.iter()) {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        for (f, reason) in skipped {
            let _ = writeln!(out, "# skipped frame {f}: {reason}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CovGenError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_text().as_bytes()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, CovGenError> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(f).lines().enumerate();
        let malformed = |line: usize, reason: String| CovGenError::Malformed {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut next_line = |expect: &str| -> Result<String, CovGenError> {
            match lines.next() {
                Some((_, Ok(l))) => Ok(l),
                Some((_, Err(e))) => Err(io_err(path)(e)),
                None => Err(malformed(0, format!("missing {expect}"))),
            }
        };
        let tag = next_line("format header")?;
        if tag.trim() != format!("{DATASET_FORMAT},{DATASET_VERSION}") {
            return Err(malformed(1, format!("unexpected format header `{tag}`")));
        }
        let meta_line = next_line("metadata header")?;
        let mut metadata = Vec::new();
        for kv in meta_line.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| malformed(2, format!("metadata entry `{kv}` is not key=value")))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        let seed = metadata
            .iter()
            .find(|(k, _)| k == "seed")
            .and_then(|(_, v)| v.parse().ok())
            .unwrap_or(0);

        let mut records: Vec<CovRecord> = Vec::new();
        let mut skipped = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.map_err(io_err(path))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# skipped frame ") {
                if let Some((f, reason)) = rest.split_once(':') {
                    if let Ok(f) = f.trim().parse() {
                        skipped.push((f, reason.trim().to_string()));
                    }
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 + 21 + 6 {
                return Err(malformed(lineno, format!("expected 30 fields, got {}", fields.len())));
            }
            let int = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| malformed(lineno, format!("`{s}`: {e}")))
            };
            let mut values = [0.0; 27];
            for (v, s) in values.iter_mut().zip(&fields[3..]) {
                *v = s
                    .trim()
                    .parse()
                    .map_err(|e| malformed(lineno, format!("`{s}`: {e}")))?;
            }
            let upper: [f64; 21] = values[..21].try_into().expect("21 entries");
            let covariance = Cov6::from_upper_triangle(&upper)
                .map_err(|e| malformed(lineno, format!("covariance: {e}")))?;
            let frame_id = int(fields[0])?;
            if records.last().is_some_and(|r| r.frame_id >= frame_id) {
                return Err(malformed(lineno, "frame ids must increase".into()));
            }
            records.push(CovRecord {
                frame_id,
                n: int(fields[1])?,
                diverged_count: int(fields[2])?,
                covariance,
                mean: Vector6::from_column_slice(&values[21..]),
                seed,
            });
        }
        Ok(Dataset {
            metadata,
            records,
            skipped,
        })
    }
}

/// Labels for one frame: local map, reduced scan, Monte-Carlo run.
pub fn generate_frame<A: Aligner + ?Sized>(
    aligner: &A,
    sequence: &dyn SequenceSource,
    frame: usize,
    cfg: &GenerateConfig,
) -> Result<FrameOutcome, CovGenError> {
    if frame >= sequence.len() {
        return Err(PointCloudError::FrameOutOfRange {
            frame,
            len: sequence.len(),
        }
        .into());
    }
    let t_bar = sequence
        .pose(frame)
        .ok_or(PointCloudError::MissingPose(frame))?;
    let map = build_local_map(sequence, frame, cfg.window, cfg.map_voxel, cfg.normal_k)?;
    let scan = voxel_downsample(&sequence.scan(frame)?, cfg.scan_voxel)?;
    let target = IcpTarget::new(map)?;
    match run_monte_carlo_with(aligner, frame, &scan, &target, &t_bar, &cfg.spec, cfg.n, cfg.seed) {
        Ok(r) => Ok(FrameOutcome::Record(r)),
        Err(e @ CovGenError::TooFewValidSamples { .. }) => Ok(FrameOutcome::Skipped {
            frame_id: frame,
            reason: e.to_string(),
        }),
        Err(e) => Err(e),
    }
}

/// Runs every frame in ascending order and assembles the dataset. Frames
/// left without enough valid samples become comment lines in the output.
pub fn generate_dataset_with<A: Aligner + ?Sized>(
    aligner: &A,
    sequence: &dyn SequenceSource,
    frames: &[usize],
    cfg: &GenerateConfig,
    mut progress: impl FnMut(&FrameOutcome),
) -> Result<Dataset, CovGenError> {
    if cfg.n < 2 {
        return Err(CovGenError::InvalidSampleCount(cfg.n));
    }
    cfg.spec.validate()?;
    cfg.icp.validate()?;
    let mut frames = frames.to_vec();
    frames.sort_unstable();
    frames.dedup();
    if let Some(&bad) = frames.iter().find(|&&f| f >= sequence.len()) {
        return Err(PointCloudError::FrameOutOfRange {
            frame: bad,
            len: sequence.len(),
        }
        .into());
    }
    let mut dataset = Dataset {
        metadata: cfg.metadata(),
        records: Vec::new(),
        skipped: Vec::new(),
    };
    for f in frames {
        let outcome = generate_frame(aligner, sequence, f, cfg)?;
        progress(&outcome);
        match outcome {
            FrameOutcome::Record(r) => dataset.records.push(r),
            FrameOutcome::Skipped { frame_id, reason } => dataset.skipped.push((frame_id, reason)),
        }
    }
    Ok(dataset)
}

pub fn generate_dataset(
    sequence: &dyn SequenceSource,
    frames: &[usize],
    cfg: &GenerateConfig,
    out: &Path,
) -> Result<Dataset, CovGenError> {
    let ds = generate_dataset_with(&PointToPlane(cfg.icp), sequence, frames, cfg, |_| {})?;
    ds.write(out)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icp::IcpResult;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Exact;

    impl Aligner for Exact {
        fn align(
            &self,
            _: AlignContext,
            _: &PointCloud,
            _: &IcpTarget,
            _: &SE3Transform,
        ) -> Result<IcpResult, IcpError> {
            Ok(IcpResult::from_estimate(truth()))
        }
    }

    struct Fixed(Twist);

    impl Aligner for Fixed {
        fn align(
            &self,
            _: AlignContext,
            _: &PointCloud,
            _: &IcpTarget,
            _: &SE3Transform,
        ) -> Result<IcpResult, IcpError> {
            Ok(IcpResult::from_estimate(self.0.exp() * truth()))
        }
    }

    /// Fails every other sample.
    struct Flaky;

    impl Aligner for Flaky {
        fn align(
            &self,
            ctx: AlignContext,
            _: &PointCloud,
            _: &IcpTarget,
            init: &SE3Transform,
        ) -> Result<IcpResult, IcpError> {
            if ctx.sample % 2 == 1 {
                Err(IcpError::NoCorrespondences {
                    iteration: 0,
                    gate: 1.0,
                })
            } else {
                Ok(IcpResult::from_estimate(*init))
            }
        }
    }

    fn truth() -> SE3Transform {
        Twist::from_slice(&[1.0, 2.0, 0.5, 0.0, 0.0, 0.3]).unwrap().exp()
    }

    fn dummy_target() -> IcpTarget {
        let pts: Vec<_> = (0..12)
            .map(|i| Vector3::new(i as f64, (i * i % 5) as f64, (i % 3) as f64))
            .collect();
        let normals = vec![Vector3::z(); pts.len()];
        IcpTarget::new(PointCloud::with_normals(pts, normals).unwrap()).unwrap()
    }

    fn dummy_scan() -> PointCloud {
        PointCloud::new(vec![Vector3::zeros()]).unwrap()
    }

    #[test]
    fn zero_spec_gives_zero_twist() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(*sample_perturbation(&PerturbationSpec::zero(), &mut rng).as_vector(), Vector6::zeros());
        }
    }

    #[test]
    fn perturbation_moments() {
        let spec = PerturbationSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let draws: Vec<Vector6<f64>> =
            (0..n).map(|_| *sample_perturbation(&spec, &mut rng).as_vector()).collect();
        let expected = [1.0, 1.0, 1.0, 0.0873, 0.0873, 0.0873];
        let mut second = Matrix6::zeros();
        for d in &draws {
            second += d * d.transpose();
        }
        second /= n as f64;
        for i in 0..6 {
            let std = second[(i, i)].sqrt();
            assert!((std - expected[i]).abs() < 0.02 * expected[i], "axis {i}: {std}");
        }
        for i in 0..6 {
            for j in (i + 1)..6 {
                let r = second[(i, j)] / (second[(i, i)] * second[(j, j)]).sqrt();
                assert!(r.abs() < 0.02, "r[{i},{j}] = {r}");
            }
        }
    }

    #[test]
    fn exact_aligner_gives_zero_covariance() {
        let rec = run_monte_carlo_with(
            &Exact,
            3,
            &dummy_scan(),
            &dummy_target(),
            &truth(),
            &PerturbationSpec::default(),
            50,
            7,
        )
        .unwrap();
        assert!(rec.covariance.max_abs() < 1e-24);
        assert_eq!((rec.n, rec.diverged_count), (50, 0));
    }

    #[test]
    fn two_identical_samples() {
        let xi = Twist::from_slice(&[0.1, -0.2, 0.05, 0.01, 0.02, -0.03]).unwrap();
        let rec = run_monte_carlo_with(
            &Fixed(xi),
            0,
            &dummy_scan(),
            &dummy_target(),
            &truth(),
            &PerturbationSpec::default(),
            2,
            0,
        )
        .unwrap();
        // Both errors equal log(T̄⁻¹·exp(ξ)·T̄) = Ad(T̄⁻¹)ξ, and
        // (vvᵀ + vvᵀ) / (2 − 1) = 2vvᵀ.
        let v = truth().inverse().adjoint() * xi.as_vector();
        for i in 0..6 {
            for j in 0..6 {
                let expect = 2.0 * v[i] * v[j];
                assert!((rec.covariance.matrix()[(i, j)] - expect).abs() < 1e-12);
            }
        }
        assert!((rec.mean - v).amax() < 1e-12);
        assert!((rec.covariance.matrix() - 2.0 * v * v.transpose()).amax() < 1e-12);
    }

    #[test]
    fn identity_aligner_recovers_perturbation_covariance() {
        // An aligner that returns its initial pose reproduces the sampling
        // distribution, so Y estimates diag(σ²).
        let spec = PerturbationSpec {
            sigma_x: 0.3,
            sigma_y: 0.2,
            sigma_z: 0.1,
            sigma_phi: 2.0,
            sigma_theta: 1.0,
            sigma_psi: 3.0,
        };
        struct Init;
        impl Aligner for Init {
            fn align(
                &self,
                _: AlignContext,
                _: &PointCloud,
                _: &IcpTarget,
                init: &SE3Transform,
            ) -> Result<IcpResult, IcpError> {
                Ok(IcpResult::from_estimate(*init))
            }
        }
        let rec = run_monte_carlo_with(&Init, 0, &dummy_scan(), &dummy_target(), &SE3Transform::identity(), &spec, 4000, 11)
            .unwrap();
        let s = spec.twist_sigmas();
        for i in 0..6 {
            let rel = rec.covariance.matrix()[(i, i)] / (s[i] * s[i]);
            assert!((rel - 1.0).abs() < 0.1, "axis {i}: {rel}");
        }
    }

    #[test]
    fn diverged_samples_are_counted() {
        let rec = run_monte_carlo_with(
            &Flaky,
            0,
            &dummy_scan(),
            &dummy_target(),
            &truth(),
            &PerturbationSpec::default(),
            10,
            0,
        )
        .unwrap();
        assert_eq!((rec.n, rec.diverged_count), (5, 5));
        let err = run_monte_carlo_with(
            &Flaky,
            0,
            &dummy_scan(),
            &dummy_target(),
            &truth(),
            &PerturbationSpec::default(),
            2,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, CovGenError::TooFewValidSamples { valid: 1, diverged: 1, .. }));
        assert!(matches!(
            run_monte_carlo_with(&Exact, 0, &dummy_scan(), &dummy_target(), &truth(), &PerturbationSpec::default(), 1, 0),
            Err(CovGenError::InvalidSampleCount(1))
        ));
    }

    #[test]
    fn dataset_text_round_trip() {
        let cov = Cov6::from_diagonal(&[1.0, 2.0, 3.0, 1e-5, 2e-5, 3e-5]).unwrap();
        let ds = Dataset {
            metadata: GenerateConfig::default().metadata(),
            records: vec![
                CovRecord {
                    frame_id: 2,
                    n: 10,
                    diverged_count: 1,
                    covariance: cov,
                    mean: Vector6::repeat(0.1),
                    seed: 0,
                },
                CovRecord {
                    frame_id: 5,
                    n: 9,
                    diverged_count: 2,
                    covariance: cov,
                    mean: Vector6::repeat(-1.0 / 3.0),
                    seed: 0,
                },
            ],
            skipped: vec![(3, "too few".into()), (9, "also".into())],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        ds.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_text(), ds.to_text());
        let text = ds.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "covloc-dataset,1");
        assert_eq!(lines[3], "# skipped frame 3: too few");
        assert_eq!(lines.last().unwrap(), &"# skipped frame 9: also");
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "something-else,1\n\n").unwrap();
        assert!(matches!(Dataset::read(&path), Err(CovGenError::Malformed { line: 1, .. })));
        fs::write(&path, "covloc-dataset,1\nseed=0\n1,2,3\n").unwrap();
        assert!(matches!(Dataset::read(&path), Err(CovGenError::Malformed { line: 3, .. })));
    }
}
