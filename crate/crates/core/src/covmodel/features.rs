//! Fixed geometric descriptors of a scan in its sensor frame.
//!
//! Every block except the normal-azimuth histogram is invariant to rotation
//! about the sensor z axis; the histogram rotates with the scan.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector3};
use sha2::{Digest, Sha256};

use super::CovModelError;
use crate::pointcloud::{estimate_normals, PointCloud};

pub const FEATURE_DIM: usize = 32;
pub const HISTOGRAM_BINS: usize = 8;
/// First index of the normal-azimuth histogram block.
pub const HISTOGRAM_OFFSET: usize = 16;
pub const FEATURE_NORMAL_K: usize = 10;

/// Outer radii of the range shells for the shape descriptors.
const SHELLS: [f64; 4] = [5.0, 10.0, 20.0, f64::INFINITY];
const OCCUPANCY_RANGE_BIN: f64 = 1.0;
const OCCUPANCY_RANGE_BINS: usize = 40;
const OCCUPANCY_Z_BIN: f64 = 0.5;
const OCCUPANCY_Z_BINS: usize = 12;

/// Layout string hashed into model files so stale models are rejected.
const LAYOUT: &str = "covloc-features-v1;entropy(range 1m x40, z 0.5m x12 from -3m);\
shells 5,10,20,inf x(linearity,planarity,sphericity);global lps;\
normal azimuth hist 8 weighted by horizontal magnitude, k=10, oriented to sensor;\
ln(1+count);pca xy extents;z extent;mean range;range variance;\
frac |nz|>0.9;frac |nz|<0.1";

pub type FeatureVector = [f64; FEATURE_DIM];

/// Hex SHA-256 of the feature layout description.
pub fn feature_spec_hash() -> String {
    let digest = Sha256::digest(LAYOUT.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Linearity, planarity and sphericity of the point scatter.
fn shape(points: &[Vector3<f64>]) -> [f64; 3] {
    if points.len() < 3 {
        return [0.0; 3];
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 {
        return [0.0; 3];
    }
    [
        (ev[0] - ev[1]) / ev[0],
        (ev[1] - ev[2]) / ev[0],
        ev[2] / ev[0],
    ]
}

fn entropy(points: &[Vector3<f64>]) -> f64 {
    let mut counts = vec![0usize; OCCUPANCY_RANGE_BINS * OCCUPANCY_Z_BINS];
    for p in points {
        let rho = (p.x * p.x + p.y * p.y).sqrt();
        let r = ((rho / OCCUPANCY_RANGE_BIN) as usize).min(OCCUPANCY_RANGE_BINS - 1);
        let zf = ((p.z + 3.0) / OCCUPANCY_Z_BIN).floor();
        let z = zf.clamp(0.0, (OCCUPANCY_Z_BINS - 1) as f64) as usize;
        counts[r * OCCUPANCY_Z_BINS + z] += 1;
    }
    let total = points.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Extents along the principal axes of the horizontal scatter.
fn pca_xy_extents(points: &[Vector3<f64>]) -> [f64; 2] {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.x / n, b + p.y / n));
    let mut c = Matrix2::zeros();
    for p in points {
        let d = nalgebra::Vector2::new(p.x - mx, p.y - my);
        c += d * d.transpose();
    }
    let eig = SymmetricEigen::new(c);
    let order = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        [0, 1]
    } else {
        [1, 0]
    };
    let mut out = [0.0; 2];
    for (slot, &k) in order.iter().enumerate() {
        let axis = eig.eigenvectors.column(k);
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let s = axis[0] * p.x + axis[1] * p.y;
            (lo.min(s), hi.max(s))
        });
        out[slot] = hi - lo;
    }
    out
}

pub fn extract_features(scan: &PointCloud) -> Result<FeatureVector, CovModelError> {
    if scan.is_empty() {
        return Err(CovModelError::EmptyCloud);
    }
    let pts = scan.points();
    let n = pts.len() as f64;
    let mut f = [0.0; FEATURE_DIM];

    f[0] = entropy(pts);
    let mut shells: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); SHELLS.len()];
    for p in pts {
        let r = p.norm();
        let s = SHELLS.iter().position(|&outer| r < outer).unwrap_or(SHELLS.len() - 1);
        shells[s].push(*p);
    }
    for (s, shell) in shells.iter().enumerate() {
        f[1 + 3 * s..4 + 3 * s].copy_from_slice(&shape(shell));
    }
    f[13..16].copy_from_slice(&shape(pts));

    if pts.len() > FEATURE_NORMAL_K {
        let with = estimate_normals(scan, FEATURE_NORMAL_K)?;
        let normals = with.normals().expect("normals were just estimated");
        let bin_width = std::f64::consts::TAU / HISTOGRAM_BINS as f64;
        let mut hist = [0.0; HISTOGRAM_BINS];
        let (mut vertical, mut horizontal) = (0usize, 0usize);
        for nrm in normals {
            let h = (nrm.x * nrm.x + nrm.y * nrm.y).sqrt();
            if h > 0.0 {
                let az = nrm.y.atan2(nrm.x).rem_euclid(std::f64::consts::TAU);
                let bin = ((az / bin_width) as usize).min(HISTOGRAM_BINS - 1);
                hist[bin] += h;
            }
            if nrm.z.abs() > 0.9 {
                vertical += 1;
            }
            if nrm.z.abs() < 0.1 {
                horizontal += 1;
            }
        }
        let total: f64 = hist.iter().sum();
        if total > 0.0 {
            for (slot, v) in f[HISTOGRAM_OFFSET..HISTOGRAM_OFFSET + HISTOGRAM_BINS]
                .iter_mut()
                .zip(hist)
            {
                *slot = v / total;
            }
        }
        f[30] = vertical as f64 / n;
        f[31] = horizontal as f64 / n;
    }

    f[24] = n.ln_1p();
    f[25..27].copy_from_slice(&pca_xy_extents(pts));
    let (zlo, zhi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.z), hi.max(p.z)));
    f[27] = zhi - zlo;
    let ranges: Vec<f64> = pts.iter().map(|p| p.norm()).collect();
    let mean = ranges.iter().sum::<f64>() / n;
    f[28] = mean;
    f[29] = ranges.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(f)
}
