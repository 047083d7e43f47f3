//! Run configuration: a TOML file, `--set` overrides, and the resolved echo
//! embedded into every output.

use std::path::{Path, PathBuf};

use covloc::covmodel::{AugmentConfig, LossWeights};
use covloc::fusion::FusionMode;
use covloc::pointcloud::{DEFAULT_MAP_VOXEL, DEFAULT_NORMAL_K, DEFAULT_SCAN_VOXEL};
use covloc::{
    FusionConfig, GenerateConfig, IcpConfig, MapWindow, PerturbationSpec, SceneKind, SynthConfig,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Synthetic,
    Kitti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSection {
    pub source: SourceKind,
    /// Synthetic scene kind: room, corridor, plane or mixed.
    pub kind: String,
    /// Number of synthetic frames.
    pub length: usize,
    pub density: f64,
    pub range_noise: f64,
    pub step: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velodyne_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poses: Option<PathBuf>,
}

impl Default for SequenceSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SequenceSection {
            source: SourceKind::Synthetic,
            kind: s.kind.name().to_string(),
            length: s.frames,
            density: s.density,
            range_noise: s.range_noise,
            step: s.step,
            seed: s.seed,
            velodyne_dir: None,
            poses: None,
        }
    }
}

/// Frames `start, start + stride, ...` below `end` (default: sequence end).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FramesSection {
    pub start: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end: Option<usize>,
    pub stride: usize,
}

impl Default for FramesSection {
    fn default() -> Self {
        FramesSection {
            start: 0,
            end: None,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSection {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
    pub sigma_phi_deg: f64,
    pub sigma_theta_deg: f64,
    pub sigma_psi_deg: f64,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        let p = PerturbationSpec::default();
        PerturbationSection {
            sigma_x: p.sigma_x,
            sigma_y: p.sigma_y,
            sigma_z: p.sigma_z,
            sigma_phi_deg: p.sigma_phi,
            sigma_theta_deg: p.sigma_theta,
            sigma_psi_deg: p.sigma_psi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSection {
    pub window_before: usize,
    pub window_after: usize,
    pub map_voxel: f64,
    pub scan_voxel: f64,
    pub normal_k: usize,
}

impl Default for MapSection {
    fn default() -> Self {
        let w = MapWindow::default();
        MapSection {
            window_before: w.before,
            window_after: w.after,
            map_voxel: DEFAULT_MAP_VOXEL,
            scan_voxel: DEFAULT_SCAN_VOXEL,
            normal_k: DEFAULT_NORMAL_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpSection {
    pub max_iterations: usize,
    pub translation_eps: f64,
    pub rotation_eps: f64,
    pub max_correspondence_distance: f64,
}

impl Default for IcpSection {
    fn default() -> Self {
        let i = IcpConfig::default();
        IcpSection {
            max_iterations: i.max_iterations,
            translation_eps: i.translation_eps,
            rotation_eps: i.rotation_eps,
            max_correspondence_distance: i.max_correspondence_distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        let g = GenerateConfig::default();
        GenerateSection { n: g.n, seed: g.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub beta: f64,
    pub huber_delta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_grad_norm: f64,
    pub warm_start: bool,
    pub augment: bool,
    pub augment_translation: f64,
    pub augment_yaw_deg: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            alpha: t.loss.alpha,
            beta: t.loss.beta,
            huber_delta: t.loss.huber_delta,
            learning_rate: t.learning_rate,
            steps: t.steps,
            batch_size: t.batch_size,
            seed: t.seed,
            max_grad_norm: t.max_grad_norm,
            warm_start: t.warm_start,
            augment: t.augment.enabled,
            augment_translation: t.augment.translation,
            augment_yaw_deg: t.augment.yaw_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub modes: Vec<String>,
    pub odometry_sigma: [f64; 6],
    pub initial_sigma: [f64; 6],
    /// Odometry-noise seeds; the table reports means over them.
    pub seeds: Vec<u64>,
    /// Standard deviations of the fixed measurement covariance. Without it
    /// the fixed covariance is the mean of the dataset labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_sigma: Option<[f64; 6]>,
}

impl Default for FusionSection {
    fn default() -> Self {
        let f = FusionConfig::default();
        FusionSection {
            modes: FusionMode::ALL.iter().map(|m| m.name().to_string()).collect(),
            odometry_sigma: f.odometry_sigma,
            initial_sigma: f.initial_sigma,
            seeds: vec![0],
            fixed_sigma: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Directory for fusion trajectories and the ADE/FDE table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Directory the `synth` command writes a KITTI-layout sequence into.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sequence: SequenceSection,
    pub frames: FramesSection,
    pub perturbation: PerturbationSection,
    pub map: MapSection,
    pub icp: IcpSection,
    pub generate: GenerateSection,
    pub train: TrainSection,
    pub fusion: FusionSection,
    pub paths: PathsSection,
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `section.key=value` to a parsed table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("at least one part");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{p}` in `{key}` is not a section")))?;
    }
    node.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Config file (optional) plus overrides, in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.scene_kind()?;
        self.fusion_modes()?;
        if self.frames.stride == 0 {
            return Err(CliError::Usage("frames.stride must be positive".into()));
        }
        if self.sequence.source == SourceKind::Kitti
            && (self.sequence.velodyne_dir.is_none() || self.sequence.poses.is_none())
        {
            return Err(CliError::Usage(
                "kitti sequences need sequence.velodyne_dir and sequence.poses".into(),
            ));
        }
        Ok(())
    }

    pub fn scene_kind(&self) -> Result<SceneKind, CliError> {
        self.sequence.kind.parse().map_err(CliError::Usage)
    }

    pub fn fusion_modes(&self) -> Result<Vec<FusionMode>, CliError> {
        let modes = self
            .fusion
            .modes
            .iter()
            .map(|m| m.parse::<FusionMode>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if modes.is_empty() {
            return Err(CliError::Usage("fusion.modes is empty".into()));
        }
        Ok(modes)
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        let s = &self.sequence;
        if !(s.density > 0.0 && s.density.is_finite()) {
            return Err(CliError::Usage(format!("sequence.density must be positive, got {}", s.density)));
        }
        Ok(SynthConfig {
            kind: self.scene_kind()?,
            frames: s.length,
            density: s.density,
            range_noise: s.range_noise,
            step: s.step,
            seed: s.seed,
        })
    }

    pub fn window(&self) -> MapWindow {
        MapWindow::new(self.map.window_before, self.map.window_after)
    }

    pub fn icp(&self) -> IcpConfig {
        let i = &self.icp;
        IcpConfig {
            max_iterations: i.max_iterations,
            translation_eps: i.translation_eps,
            rotation_eps: i.rotation_eps,
            max_correspondence_distance: i.max_correspondence_distance,
        }
    }

    pub fn generate(&self) -> GenerateConfig {
        let p = &self.perturbation;
        GenerateConfig {
            spec: PerturbationSpec {
                sigma_x: p.sigma_x,
                sigma_y: p.sigma_y,
                sigma_z: p.sigma_z,
                sigma_phi: p.sigma_phi_deg,
                sigma_theta: p.sigma_theta_deg,
                sigma_psi: p.sigma_psi_deg,
            },
            n: self.generate.n,
            window: self.window(),
            map_voxel: self.map.map_voxel,
            scan_voxel: self.map.scan_voxel,
            normal_k: self.map.normal_k,
            icp: self.icp(),
            seed: self.generate.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            loss: LossWeights {
                alpha: t.alpha,
                beta: t.beta,
                huber_delta: t.huber_delta,
            },
            learning_rate: t.learning_rate,
            steps: t.steps,
            batch_size: t.batch_size,
            seed: t.seed,
            augment: AugmentConfig {
                enabled: t.augment,
                translation: t.augment_translation,
                yaw_deg: t.augment_yaw_deg,
            },
            max_grad_norm: t.max_grad_norm,
            warm_start: t.warm_start,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            odometry_sigma: self.fusion.odometry_sigma,
            initial_sigma: self.fusion.initial_sigma,
            window: self.window(),
            map_voxel: self.map.map_voxel,
            scan_voxel: self.map.scan_voxel,
            normal_k: self.map.normal_k,
            icp: self.icp(),
        }
    }

    /// Settings that have no effect are reset, so equivalent configurations
    /// echo identically.
    pub fn resolved(&self) -> RunConfig {
        let mut r = self.clone();
        let (translation, yaw) = self.train().augment.effective();
        r.train.augment = self.train().augment.is_active();
        r.train.augment_translation = translation;
        r.train.augment_yaw_deg = yaw;
        r
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.resolved()).expect("config serializes")
    }

    /// Dotted `section.key` pairs in sorted order. Arrays are `;`-joined so
    /// values stay free of commas.
    pub fn flat(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self.resolved()).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }

    /// The flat echo as `# key = value` comment lines.
    pub fn comment_header(&self) -> String {
        self.flat()
            .iter()
            .map(|(k, v)| format!("# {k} = {v}\n"))
            .collect()
    }
}

fn render(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(a) => a.iter().map(render).collect::<Vec<_>>().join(";"),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), render(other))),
    }
}
