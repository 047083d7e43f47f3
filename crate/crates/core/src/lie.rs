//! Rigid transforms on SE(3), twists on se(3), and 6×6 pose covariances.
//!
//! Every 6-vector and 6×6 matrix in this crate uses the twist ordering
//! `(u_x, u_y, u_z, ω_x, ω_y, ω_z)`: translation block first, rotation block
//! second. The exponential map uses the left-Jacobian (`V` matrix) convention
//! for the translation part.

use nalgebra::{Matrix3, Matrix4, Matrix6, SymmetricEigen, Vector3, Vector6};
use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;
use thiserror::Error;

/// Below this rotation angle the exponential map switches to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Logarithm refuses rotations whose angle is within this distance of π.
pub const NEAR_PI_MARGIN: f64 = 1e-6;
/// Orthonormality / determinant tolerance for a valid rotation matrix.
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Relative tolerance for covariance symmetry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Lowest admissible eigenvalue of a covariance, scaled by `max(1, ‖Y‖_F)`.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LieError {
    #[error("rotation angle {angle} rad is within {NEAR_PI_MARGIN:e} of pi; the logarithm branch is ambiguous")]
    AngleNearPi { angle: f64 },
    #[error("twist has non-finite entries")]
    NonFinite,
    #[error("twist rotation norm {norm} rad is outside the principal branch (< pi)")]
    OutsidePrincipalBranch { norm: f64 },
    #[error("not a rotation matrix (orthonormality error {orthonormality:e}, determinant {determinant})")]
    InvalidRotation { orthonormality: f64, determinant: f64 },
    #[error("covariance is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive semi-definite (min eigenvalue {0:e})")]
    NotPositiveSemiDefinite(f64),
}

/// Skew-symmetric matrix `[v]ₓ` such that `[v]ₓ w = v × w`.
#[rustfmt::skip]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y,
        v.z, 0.0, -v.x,
        -v.y, v.x, 0.0,
    )
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// A rigid transformation `p ↦ R p + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct SE3Transform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl fmt::Debug for SE3Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SE3Transform")
            .field("rotation", &self.rotation.as_slice())
            .field("translation", &self.translation.as_slice())
            .finish()
    }
}

impl Default for SE3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` lies on SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, LieError> {
        let orthonormality = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let determinant = rotation.determinant();
        let finite = rotation.iter().chain(translation.iter()).all(|v| v.is_finite());
        if !finite
            || orthonormality > ROTATION_TOLERANCE
            || (determinant - 1.0).abs() > ROTATION_TOLERANCE
        {
            return Err(LieError::InvalidRotation {
                orthonormality,
                determinant,
            });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a transform from a nearly-orthonormal matrix (for example a pose
    /// file printed with few digits) by projecting it onto SO(3).
    ///
    /// Matrices further than `tolerance` (Frobenius) from a rotation are rejected.
    pub fn from_approximate(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tolerance: f64,
    ) -> Result<Self, LieError> {
        let svd = rotation.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => {
                return Err(LieError::InvalidRotation {
                    orthonormality: f64::NAN,
                    determinant: rotation.determinant(),
                })
            }
        };
        let mut fix = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            fix[(2, 2)] = -1.0;
        }
        let projected = u * fix * v_t;
        let distance = (projected - rotation).norm();
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
        if !(distance <= tolerance) {
            return Err(LieError::InvalidRotation {
                orthonormality: (rotation.transpose() * rotation - Matrix3::identity()).norm(),
                determinant: rotation.determinant(),
            });
        }
        Self::new(projected, translation)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        #[rustfmt::skip]
        let rotation = Matrix3::new(
            c, -s, 0.0,
            s, c, 0.0,
            0.0, 0.0, 1.0,
        );
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &SE3Transform) -> SE3Transform {
        SE3Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Transform {
        let rt = self.rotation.transpose();
        SE3Transform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let s = vee(&(self.rotation - self.rotation.transpose())).norm() * 0.5;
        s.atan2(c)
    }

    /// 6×6 adjoint `[[R, [t]ₓR], [0, R]]`, so that `T exp(ξ) T⁻¹ = exp(Ad_T ξ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * self.rotation));
        ad
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major `[R | t]`, the layout of a KITTI pose line.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[4 * r + c] = self.rotation[(r, c)];
            }
            out[4 * r + 3] = self.translation[r];
        }
        out
    }

    /// Logarithm map onto the principal branch.
    pub fn log(&self) -> Result<Twist, LieError> {
        let r = &self.rotation;
        let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let sin_axis = vee(&(r - r.transpose())) * 0.5;
        let sin_theta = sin_axis.norm();
        let theta = sin_theta.atan2(cos_theta);
        if theta > PI - NEAR_PI_MARGIN {
            return Err(LieError::AngleNearPi { angle: theta });
        }

        let omega = if cos_theta >= 0.0 {
            let factor = if theta < SMALL_ANGLE {
                1.0 + theta * theta / 6.0
            } else {
                theta / sin_theta
            };
            sin_axis * factor
        } else {
            // Past π/2 the skew part loses precision; read the axis from the
            // symmetric part (1 − cos θ) a aᵀ instead.
            let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
            let one_minus_cos = 1.0 - cos_theta;
            let i = (0..3)
                .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
                .unwrap_or(0);
            let ai = (sym[(i, i)] / one_minus_cos).max(0.0).sqrt();
            let mut axis: Vector3<f64> = sym.column(i) / (one_minus_cos * ai);
            axis.normalize_mut();
            if axis.dot(&sin_axis) < 0.0 {
                axis = -axis;
            }
            axis * theta
        };

        let w = hat(&omega);
        let coeff = if theta < 1e-4 {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half / half.tan()) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w * w * coeff;
        let u = v_inv * self.translation;
        Twist::new(u, omega)
    }

    fn is_finite(&self) -> bool {
        self.rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
    }
}

impl Mul for SE3Transform {
    type Output = SE3Transform;

    fn mul(self, rhs: SE3Transform) -> SE3Transform {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a SE3Transform> for &'a SE3Transform {
    type Output = SE3Transform;

    fn mul(self, rhs: &'a SE3Transform) -> SE3Transform {
        self.compose(rhs)
    }
}

/// se(3) element `ξ = [u; ω]`, with `‖ω‖ < π`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(Vector6<f64>);

impl Default for Twist {
    fn default() -> Self {
        Self::zero()
    }
}

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(u: Vector3<f64>, omega: Vector3<f64>) -> Result<Self, LieError> {
        Self::from_vector(Vector6::new(u.x, u.y, u.z, omega.x, omega.y, omega.z))
    }

    pub fn from_vector(v: Vector6<f64>) -> Result<Self, LieError> {
        if !v.iter().all(|x| x.is_finite()) {
            return Err(LieError::NonFinite);
        }
        let norm = v.fixed_rows::<3>(3).norm();
        if norm >= PI {
            return Err(LieError::OutsidePrincipalBranch { norm });
        }
        Ok(Twist(v))
    }

    pub fn from_slice(v: &[f64; 6]) -> Result<Self, LieError> {
        Self::from_vector(Vector6::from_column_slice(v))
    }

    pub fn u(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }

    /// Exponential map: Rodrigues for the rotation, left Jacobian `V` for the
    /// translation.
    pub fn exp(&self) -> SE3Transform {
        let omega = self.omega();
        let theta_sq = omega.norm_squared();
        let theta = theta_sq.sqrt();
        let (a, b, c) = if theta < SMALL_ANGLE {
            (
                1.0 - theta_sq / 6.0,
                0.5 - theta_sq / 24.0,
                1.0 / 6.0 - theta_sq / 120.0,
            )
        } else {
            let half = 0.5 * theta;
            let sinc_half = half.sin() / half;
            (
                theta.sin() / theta,
                0.5 * sinc_half * sinc_half,
                (theta - theta.sin()) / (theta_sq * theta),
            )
        };
        let w = hat(&omega);
        let w2 = w * w;
        let rotation = Matrix3::identity() + w * a + w2 * b;
        let v = Matrix3::identity() + w * b + w2 * c;
        SE3Transform {
            rotation,
            translation: v * self.u(),
        }
    }
}

/// Symmetric positive semi-definite 6×6 pose covariance in twist ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov6(Matrix6<f64>);

/// Upper-triangular index pairs in row-major order (`u_x` row first).
pub const UPPER_TRIANGLE: [(usize, usize); 21] = {
    let mut out = [(0, 0); 21];
    let mut k = 0;
    let mut i = 0;
    while i < 6 {
        let mut j = i;
        while j < 6 {
            out[k] = (i, j);
            k += 1;
            j += 1;
        }
        i += 1;
    }
    out
};

impl Cov6 {
    pub fn zeros() -> Self {
        Cov6(Matrix6::zeros())
    }

    pub fn from_diagonal(d: &[f64; 6]) -> Result<Self, LieError> {
        Self::new(Matrix6::from_diagonal(&Vector6::from_column_slice(d)))
    }

    /// Validates symmetry and positive semi-definiteness.
    pub fn new(m: Matrix6<f64>) -> Result<Self, LieError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(LieError::NonFinite);
        }
        let norm = m.norm();
        let asym = (m - m.transpose()).norm();
        if asym > SYMMETRY_TOLERANCE * norm {
            return Err(LieError::NotSymmetric(if norm > 0.0 { asym / norm } else { asym }));
        }
        let c = Cov6(m);
        let min = c.min_eigenvalue();
        if min < -PSD_TOLERANCE * norm.max(1.0) {
            return Err(LieError::NotPositiveSemiDefinite(min));
        }
        Ok(c)
    }

    /// Averages `m` with its transpose before validating; for matrices that
    /// are symmetric in exact arithmetic but carry rounding asymmetry.
    pub fn symmetrized(m: Matrix6<f64>) -> Result<Self, LieError> {
        Self::new((m + m.transpose()) * 0.5)
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix6<f64> {
        self.0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.0)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn eigenvalues(&self) -> Vector6<f64> {
        SymmetricEigen::new(self.0).eigenvalues
    }

    /// Congruence `A Y Aᵀ`, e.g. covariance transport by an adjoint.
    pub fn transported(&self, a: &Matrix6<f64>) -> Result<Cov6, LieError> {
        Cov6::symmetrized(a * self.0 * a.transpose())
    }

    /// The 21 upper-triangular entries in row-major order.
    pub fn upper_triangle(&self) -> [f64; 21] {
        let mut out = [0.0; 21];
        for (k, &(i, j)) in UPPER_TRIANGLE.iter().enumerate() {
            out[k] = self.0[(i, j)];
        }
        out
    }

    pub fn from_upper_triangle(values: &[f64; 21]) -> Result<Self, LieError> {
        let mut m = Matrix6::zeros();
        for (k, &(i, j)) in UPPER_TRIANGLE.iter().enumerate() {
            m[(i, j)] = values[k];
            m[(j, i)] = values[k];
        }
        Self::new(m)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }
}

impl SE3Transform {
    /// Whether all entries are finite and the rotation is within tolerance of SO(3).
    pub fn is_valid(&self) -> bool {
        self.is_finite()
            && (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
                <= ROTATION_TOLERANCE
            && (self.rotation.determinant() - 1.0).abs() <= ROTATION_TOLERANCE
    }
}
