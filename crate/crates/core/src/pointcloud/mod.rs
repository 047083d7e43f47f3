//! Point clouds and the geometric preprocessing used before alignment:
//! voxel reduction, PCA normals, rigid transformation, and KITTI I/O.

mod kdtree;
mod map;

pub use kdtree::NeighborIndex;
pub use map::{build_local_map, InMemorySequence, KittiSequence, MapWindow, SequenceSource};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::lie::SE3Transform;

/// Default voxel edge for local maps, in meters.
pub const DEFAULT_MAP_VOXEL: f64 = 1.0;
/// Default voxel edge for the reference scan, in meters.
pub const DEFAULT_SCAN_VOXEL: f64 = 0.1;
/// Default neighbor count for normal estimation.
pub const DEFAULT_NORMAL_K: usize = 10;

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scan {path}: {reason}")]
    MalformedScan { path: PathBuf, reason: String },
    #[error("malformed pose file {path}, line {line}: {reason}")]
    MalformedPoses {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),
    #[error("normal estimation needs at least {needed} points (k = {k}), got {got}")]
    TooFewPoints { needed: usize, got: usize, k: usize },
    #[error("nearest-neighbor query on an empty index")]
    EmptyIndex,
    #[error("no ground-truth pose for frame {0}")]
    MissingPose(usize),
    #[error("no frames available in the requested window")]
    EmptySequence,
    #[error("frame {frame} is outside the sequence (length {len})")]
    FrameOutOfRange { frame: usize, len: usize },
    #[error("point cloud contains non-finite coordinates")]
    NonFinite,
    #[error("normals: {0}")]
    InvalidNormals(String),
}

impl PointCloudError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PointCloudError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Unordered 3D point set with optional unit normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, PointCloudError> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(PointCloudError::NonFinite);
        }
        Ok(PointCloud {
            points,
            normals: None,
        })
    }

    pub fn with_normals(
        points: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
    ) -> Result<Self, PointCloudError> {
        let mut cloud = Self::new(points)?;
        if normals.len() != cloud.points.len() {
            return Err(PointCloudError::InvalidNormals(format!(
                "{} normals for {} points",
                normals.len(),
                cloud.points.len()
            )));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
        if let Some(bad) = normals.iter().find(|n| !((n.norm() - 1.0).abs() <= 1e-6)) {
            return Err(PointCloudError::InvalidNormals(format!(
                "normal {bad:?} is not unit length"
            )));
        }
        cloud.normals = Some(normals);
        Ok(cloud)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    /// Maps points by `R p + t` and normals by `R n`.
    pub fn transformed(&self, t: &SE3Transform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.transform_vector(n)).collect()),
        }
    }

    /// Concatenates clouds, keeping normals only when every part has them.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a PointCloud>) -> PointCloud {
        let mut points = Vec::new();
        let mut normals = Some(Vec::new());
        for part in parts {
            points.extend_from_slice(&part.points);
            match (&mut normals, &part.normals) {
                (Some(acc), Some(ns)) => acc.extend_from_slice(ns),
                _ => normals = None,
            }
        }
        PointCloud { points, normals }
    }
}

/// One point per occupied voxel, at the centroid of its members. Voxel keys are
/// `floor(coordinate / voxel_size)` per axis; output is sorted by key.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud, PointCloudError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(PointCloudError::InvalidVoxelSize(voxel_size));
    }
    let mut cells: HashMap<[i64; 3], (Vector3<f64>, usize)> = HashMap::new();
    for p in &cloud.points {
        let key = [
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        ];
        let cell = cells.entry(key).or_insert((Vector3::zeros(), 0));
        cell.0 += p;
        cell.1 += 1;
    }
    let mut cells: Vec<_> = cells.into_iter().collect();
    cells.sort_unstable_by_key(|(k, _)| *k);
    Ok(PointCloud {
        points: cells
            .into_iter()
            .map(|(_, (sum, n))| sum / n as f64)
            .collect(),
        normals: None,
    })
}

/// PCA normal of `k` neighbors plus the point itself, oriented towards the
/// frame origin. Normals exactly perpendicular to the viewing ray get their
/// largest-magnitude component made positive.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud, PointCloudError> {
    if k < 3 || cloud.len() < k + 1 {
        return Err(PointCloudError::TooFewPoints {
            needed: (k + 1).max(4),
            got: cloud.len(),
            k,
        });
    }
    let index = NeighborIndex::build(&cloud.points);
    let normals: Vec<Vector3<f64>> = cloud
        .points
        .par_iter()
        .map(|p| {
            let neighbors = index.k_nearest(p, k + 1);
            let n = neighbors.len() as f64;
            let mean = neighbors
                .iter()
                .fold(Vector3::zeros(), |acc, &(i, _)| acc + index.point(i))
                / n;
            let scatter = neighbors.iter().fold(Matrix3::zeros(), |acc, &(i, _)| {
                let d = index.point(i) - mean;
                acc + d * d.transpose()
            });
            orient(smallest_eigenvector(&scatter), p)
        })
        .collect();
    Ok(PointCloud {
        points: cloud.points.clone(),
        normals: Some(normals),
    })
}

pub(crate) fn smallest_eigenvector(m: &Matrix3<f64>) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*m);
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).normalize()
}

fn orient(n: Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let toward = -n.dot(p);
    if toward.abs() <= 1e-9 * p.norm() {
        if n[n.iamax()] < 0.0 {
            -n
        } else {
            n
        }
    } else if toward < 0.0 {
        -n
    } else {
        n
    }
}

/// Reads a KITTI velodyne scan: little-endian f32 records `(x, y, z, reflectance)`.
pub fn load_kitti_scan(path: &Path) -> Result<PointCloud, PointCloudError> {
    let bytes = fs::read(path).map_err(|e| PointCloudError::io(path, e))?;
    parse_kitti_scan(&bytes).map_err(|reason| PointCloudError::MalformedScan {
        path: path.to_path_buf(),
        reason,
    })
}

fn parse_kitti_scan(bytes: &[u8]) -> Result<PointCloud, String> {
    if !bytes.len().is_multiple_of(16) {
        return Err(format!("length {} is not a multiple of 16", bytes.len()));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
        let (x, y, z, r) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && r.is_finite()) {
            return Err(format!("record {i} has non-finite values"));
        }
        points.push(Vector3::new(x as f64, y as f64, z as f64));
    }
    Ok(PointCloud {
        points,
        normals: None,
    })
}

/// Writes a cloud in KITTI velodyne layout with zero reflectance.
pub fn write_kitti_scan(path: &Path, cloud: &PointCloud) -> Result<(), PointCloudError> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| PointCloudError::io(path, e))
}

/// Reads a KITTI pose file: one row-major 3×4 `[R|t]` per line. Rotations
/// are re-projected onto SO(3) to absorb the file's limited precision.
pub fn load_kitti_poses(path: &Path) -> Result<Vec<SE3Transform>, PointCloudError> {
    let file = fs::File::open(path).map_err(|e| PointCloudError::io(path, e))?;
    let mut poses = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PointCloudError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| PointCloudError::MalformedPoses {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{t:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 12 {
            return Err(bad(format!("expected 12 values, found {}", values.len())));
        }
        poses.push(pose_from_row_major(&values).map_err(|e| bad(e.to_string()))?);
    }
    Ok(poses)
}

pub fn pose_from_row_major(values: &[f64]) -> Result<SE3Transform, crate::lie::LieError> {
    let rotation = Matrix3::new(
        values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
        values[10],
    );
    let translation = Vector3::new(values[3], values[7], values[11]);
    SE3Transform::from_approximate(rotation, translation, 1e-3)
}

/// Formats one pose as 12 space-separated values with 17 significant digits.
pub fn format_pose_row(pose: &SE3Transform) -> String {
    pose.to_row_major_3x4()
        .iter()
        .map(|v| format!("{v:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_kitti_poses(path: &Path, poses: &[SE3Transform]) -> Result<(), PointCloudError> {
    let mut out = Vec::new();
    for pose in poses {
        writeln!(out, "{}", format_pose_row(pose)).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| PointCloudError::io(path, e))
}
