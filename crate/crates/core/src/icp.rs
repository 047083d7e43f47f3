//! Point-to-plane ICP with Gauss-Newton steps on a left-multiplied se(3)
//! increment, `T ← exp(δ)·T`.
//!
//! Plain formulation: one nearest neighbor per source point inside a distance
//! gate, no reciprocity test, no robust kernel. A rank-deficient normal
//! matrix does not abort the solve; the step is taken with a pseudo-inverse
//! and the degeneracy is reported in [`IcpResult`].

use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::lie::{SE3Transform, Twist};
use crate::pointcloud::{NeighborIndex, PointCloud};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RELATIVE_PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("no correspondences within {gate} m at iteration {iteration}")]
    NoCorrespondences { iteration: usize, gate: f64 },
    #[error("source cloud is empty")]
    EmptySource,
    #[error("target cloud is empty")]
    EmptyTarget,
    #[error("target cloud has no normals")]
    MissingNormals,
    #[error("invalid ICP configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the translation part of a step is below this (m)...
    pub translation_eps: f64,
    /// ...and the rotation part is below this (rad).
    pub rotation_eps: f64,
    pub max_correspondence_distance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 30,
            translation_eps: 1e-4,
            rotation_eps: 1e-4,
            max_correspondence_distance: 2.0,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), IcpError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.max_iterations == 0
            || !positive(self.translation_eps)
            || !positive(self.rotation_eps)
            || !positive(self.max_correspondence_distance)
        {
            return Err(IcpError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// A normal-equipped target cloud with its prebuilt neighbor index.
#[derive(Debug, Clone)]
pub struct IcpTarget {
    cloud: PointCloud,
    index: NeighborIndex,
}

impl IcpTarget {
    pub fn new(cloud: PointCloud) -> Result<Self, IcpError> {
        if cloud.is_empty() {
            return Err(IcpError::EmptyTarget);
        }
        if cloud.normals().is_none() {
            return Err(IcpError::MissingNormals);
        }
        let index = NeighborIndex::build(cloud.points());
        Ok(IcpTarget { cloud, index })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    fn normal(&self, id: usize) -> &Vector3<f64> {
        // Presence checked in `new`.
        &self.cloud.normals().expect("target normals")[id]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub estimate: SE3Transform,
    pub converged: bool,
    pub iterations_used: usize,
    /// Point-to-plane RMSE over gated correspondences at the initial pose.
    pub initial_rmse: f64,
    /// Point-to-plane RMSE over gated correspondences at the estimate.
    pub final_rmse: f64,
    /// `λ_max / λ_min` of the normal matrix at the estimate (∞ when singular).
    pub condition_number: f64,
    /// Set when the normal matrix at the estimate is rank-deficient beyond
    /// [`RELATIVE_PIVOT_TOLERANCE`] and steps were taken with a pseudo-inverse.
    pub singular_normal_matrix: bool,
    pub correspondences: usize,
}

impl IcpResult {
    /// A result carrying only an estimate, for alignment stand-ins.
    pub fn from_estimate(estimate: SE3Transform) -> Self {
        IcpResult {
            estimate,
            converged: true,
            iterations_used: 0,
            initial_rmse: 0.0,
            final_rmse: 0.0,
            condition_number: 1.0,
            singular_normal_matrix: false,
            correspondences: 0,
        }
    }
}

struct Linearization {
    hessian: Matrix6<f64>,
    gradient: Vector6<f64>,
    rmse: f64,
    count: usize,
}

fn linearize(
    source: &PointCloud,
    target: &IcpTarget,
    pose: &SE3Transform,
    gate: f64,
) -> Linearization {
    let terms: Vec<Option<(Vector6<f64>, f64)>> = source
        .points()
        .par_iter()
        .map(|p| {
            let moved = pose.transform_point(p);
            let (id, dist) = target.index.nearest(&moved).ok()?;
            if dist > gate {
                return None;
            }
            let n = target.normal(id);
            let r = n.dot(&(moved - target.index.point(id)));
            let w = moved.cross(n);
            Some((Vector6::new(n.x, n.y, n.z, w.x, w.y, w.z), r))
        })
        .collect();
    // Fixed-order reduction keeps results independent of the thread count.
    let mut hessian = Matrix6::zeros();
    let mut gradient = Vector6::zeros();
    let mut sq = 0.0;
    let mut count = 0;
    for (j, r) in terms.into_iter().flatten() {
        hessian += j * j.transpose();
        gradient += j * r;
        sq += r * r;
        count += 1;
    }
    Linearization {
        hessian,
        gradient,
        rmse: if count > 0 { (sq / count as f64).sqrt() } else { 0.0 },
        count,
    }
}

struct Solve {
    step: Vector6<f64>,
    condition_number: f64,
    singular: bool,
}

/// Solves `H δ = -g` through the eigendecomposition of `H`, dropping
/// directions whose eigenvalue is below the relative pivot tolerance.
fn solve_normal_equations(h: &Matrix6<f64>, g: &Vector6<f64>) -> Solve {
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cutoff = RELATIVE_PIVOT_TOLERANCE * max;
    let mut step = Vector6::zeros();
    let mut singular = false;
    for i in 0..6 {
        let lambda = eig.eigenvalues[i];
        if lambda > cutoff && lambda > 0.0 {
            let v = eig.eigenvectors.column(i);
            step -= v * (v.dot(g) / lambda);
        } else {
            singular = true;
        }
    }
    let condition_number = if min > 0.0 && !singular { max / min } else { f64::INFINITY };
    Solve {
        step,
        condition_number,
        singular,
    }
}

/// Aligns `source` (sensor frame) to `target` starting from `initial`.
pub fn icp_point_to_plane(
    source: &PointCloud,
    target: &IcpTarget,
    initial: &SE3Transform,
    cfg: &IcpConfig,
) -> Result<IcpResult, IcpError> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(IcpError::EmptySource);
    }
    let gate = cfg.max_correspondence_distance;
    let mut pose = *initial;
    let mut initial_rmse = 0.0;
    let mut converged = false;
    let mut iterations_used = 0;

    for iteration in 0..cfg.max_iterations {
        let lin = linearize(source, target, &pose, gate);
        if lin.count == 0 {
            return Err(IcpError::NoCorrespondences { iteration, gate });
        }
        if iteration == 0 {
            initial_rmse = lin.rmse;
        }
        let solve = solve_normal_equations(&lin.hessian, &lin.gradient);
        iterations_used = iteration + 1;
        let step = clamp_rotation(solve.step);
        pose = Twist::from_vector(step)
            .expect("clamped step lies on the principal branch")
            .exp()
            .compose(&pose);
        let du = step.fixed_rows::<3>(0).norm();
        let dw = step.fixed_rows::<3>(3).norm();
        if du < cfg.translation_eps && dw < cfg.rotation_eps {
            converged = true;
            break;
        }
    }

    let last = linearize(source, target, &pose, gate);
    if last.count == 0 {
        return Err(IcpError::NoCorrespondences {
            iteration: iterations_used,
            gate,
        });
    }
    let diag = solve_normal_equations(&last.hessian, &last.gradient);
    Ok(IcpResult {
        estimate: pose,
        converged,
        iterations_used,
        initial_rmse,
        final_rmse: last.rmse,
        condition_number: diag.condition_number,
        singular_normal_matrix: diag.singular,
        correspondences: last.count,
    })
}

/// Gauss-Newton steps are small in practice; a wild one is scaled back onto
/// the principal branch rather than wrapped.
fn clamp_rotation(step: Vector6<f64>) -> Vector6<f64> {
    const MAX_ROTATION: f64 = 1.0;
    let w = step.fixed_rows::<3>(3).norm();
    if w > MAX_ROTATION {
        step * (MAX_ROTATION / w)
    } else {
        step
    }
}

/// Identifies one alignment inside a batch, so stand-ins can be seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignContext {
    pub frame_id: usize,
    pub sample: usize,
}

/// The scan-to-map alignment operator, `T̂ = ICP(P, Q, T)`.
pub trait Aligner: Sync {
    fn align(
        &self,
        ctx: AlignContext,
        source: &PointCloud,
        target: &IcpTarget,
        initial: &SE3Transform,
    ) -> Result<IcpResult, IcpError>;
}

/// Point-to-plane ICP as an [`Aligner`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PointToPlane(pub IcpConfig);

impl Aligner for PointToPlane {
    fn align(
        &self,
        _ctx: AlignContext,
        source: &PointCloud,
        target: &IcpTarget,
        initial: &SE3Transform,
    ) -> Result<IcpResult, IcpError> {
        icp_point_to_plane(source, target, initial, &self.0)
    }
}
