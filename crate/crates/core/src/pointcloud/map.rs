use rayon::prelude::*;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use super::{
    estimate_normals, load_kitti_poses, load_kitti_scan, voxel_downsample, PointCloud,
    PointCloudError,
};
use crate::lie::SE3Transform;

/// How many frames before and after the reference frame enter its local map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapWindow {
    pub before: usize,
    pub after: usize,
}

impl Default for MapWindow {
    fn default() -> Self {
        MapWindow {
            before: 20,
            after: 10,
        }
    }
}

impl MapWindow {
    pub fn new(before: usize, after: usize) -> Self {
        MapWindow { before, after }
    }

    /// Frames of the window around `frame`, clamped to a sequence of `len` frames.
    pub fn frames(&self, frame: usize, len: usize) -> Option<RangeInclusive<usize>> {
        if frame >= len {
            return None;
        }
        let lo = frame.saturating_sub(self.before);
        let hi = frame.saturating_add(self.after).min(len - 1);
        Some(lo..=hi)
    }
}

/// Frame-indexed scans (sensor frame) with ground-truth sensor poses.
pub trait SequenceSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn scan(&self, frame: usize) -> Result<PointCloud, PointCloudError>;

    /// Pose mapping the frame's sensor coordinates into the global frame.
    fn pose(&self, frame: usize) -> Option<SE3Transform>;
}

#[derive(Debug, Clone, Default)]
pub struct InMemorySequence {
    pub scans: Vec<PointCloud>,
    pub poses: Vec<SE3Transform>,
}

impl InMemorySequence {
    pub fn new(scans: Vec<PointCloud>, poses: Vec<SE3Transform>) -> Self {
        InMemorySequence { scans, poses }
    }
}

impl SequenceSource for InMemorySequence {
    fn len(&self) -> usize {
        self.scans.len()
    }

    fn scan(&self, frame: usize) -> Result<PointCloud, PointCloudError> {
        self.scans
            .get(frame)
            .cloned()
            .ok_or(PointCloudError::FrameOutOfRange {
                frame,
                len: self.scans.len(),
            })
    }

    fn pose(&self, frame: usize) -> Option<SE3Transform> {
        self.poses.get(frame).copied()
    }
}

/// A KITTI odometry sequence on disk: `velodyne/NNNNNN.bin` scans plus a pose file.
///
/// Poses are used in the file's own convention, without any camera-to-LiDAR
/// extrinsic correction.
#[derive(Debug, Clone)]
pub struct KittiSequence {
    velodyne_dir: PathBuf,
    frame_count: usize,
    poses: Vec<SE3Transform>,
}

impl KittiSequence {
    pub fn open(velodyne_dir: &Path, poses_path: &Path) -> Result<Self, PointCloudError> {
        let poses = load_kitti_poses(poses_path)?;
        let entries =
            fs::read_dir(velodyne_dir).map_err(|e| PointCloudError::io(velodyne_dir, e))?;
        let mut frame_count = 0;
        for entry in entries {
            let entry = entry.map_err(|e| PointCloudError::io(velodyne_dir, e))?;
            if entry.path().extension().is_some_and(|e| e == "bin") {
                frame_count += 1;
            }
        }
        Ok(KittiSequence {
            velodyne_dir: velodyne_dir.to_path_buf(),
            frame_count,
            poses,
        })
    }

    pub fn scan_path(&self, frame: usize) -> PathBuf {
        self.velodyne_dir.join(format!("{frame:06}.bin"))
    }
}

impl SequenceSource for KittiSequence {
    fn len(&self) -> usize {
        self.frame_count
    }

    fn scan(&self, frame: usize) -> Result<PointCloud, PointCloudError> {
        load_kitti_scan(&self.scan_path(frame))
    }

    fn pose(&self, frame: usize) -> Option<SE3Transform> {
        self.poses.get(frame).copied()
    }
}

/// Local map around `frame`: every in-window scan (the reference frame
/// included) moved into the global frame by its ground-truth pose,
/// concatenated in frame order, voxel-reduced, then given normals.
pub fn build_local_map(
    source: &dyn SequenceSource,
    frame: usize,
    window: MapWindow,
    map_voxel: f64,
    normal_k: usize,
) -> Result<PointCloud, PointCloudError> {
    let frames = window
        .frames(frame, source.len())
        .ok_or(PointCloudError::EmptySequence)?;
    let parts: Vec<PointCloud> = frames
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|f| {
            let pose = source.pose(f).ok_or(PointCloudError::MissingPose(f))?;
            Ok(source.scan(f)?.transformed(&pose))
        })
        .collect::<Result<_, PointCloudError>>()?;
    let merged = PointCloud::concat(parts.iter());
    let reduced = voxel_downsample(&merged, map_voxel)?;
    estimate_normals(&reduced, normal_k)
}
