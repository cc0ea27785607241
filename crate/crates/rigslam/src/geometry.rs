//! SE(3) rigid-transform algebra.
//!
//! Poses are stored as a rotation matrix plus translation vector and act on
//! points as `R * p + t`. Twists (elements of the Lie algebra) are ordered
//! (rotation, translation) so that the 3x6 point-motion Jacobian has the
//! block layout `[-P^ | I]` with rotational columns first.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum tolerated departure from orthonormality before a rotation is
/// re-orthonormalized via polar decomposition.
pub const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Below this rotation magnitude the exp/log maps switch to their
/// small-angle series.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation angle {angle} is within {margin} of pi; log map is near-singular")]
    LogNearSingular { angle: f64, margin: f64 },
}

/// Element of se(3): rotational part first, translational part second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.rotation.norm_squared() + self.translation.norm_squared()).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rotation: self.rotation * s,
            translation: self.translation * s,
        }
    }
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from parts, re-orthonormalizing the rotation if it has
    /// drifted beyond [`ORTHONORMALITY_TOL`].
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut pose = Self {
            rotation,
            translation,
        };
        if pose.orthonormality_defect() > ORTHONORMALITY_TOL {
            pose.rotation = nearest_rotation(&pose.rotation);
        }
        pose
    }

    /// Rotation about a unit axis by `angle` radians, with translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let xi = Twist::new(axis.normalize() * angle, Vector3::zeros());
        let mut pose = exp(&xi);
        pose.translation = translation;
        pose
    }

    /// Serialization order (qx, qy, qz, qw), matching the trajectory and rig
    /// file formats.
    pub fn from_quaternion_translation(
        qx: f64,
        qy: f64,
        qz: f64,
        qw: f64,
        translation: Vector3<f64>,
    ) -> Self {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let uq = nalgebra::UnitQuaternion::from_quaternion(q);
        Self::from_parts(uq.to_rotation_matrix().into_inner(), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Unit quaternion (x, y, z, w) with non-negative w.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let uq = nalgebra::UnitQuaternion::from_matrix(&self.rotation);
        let q = uq.quaternion();
        if q.w < 0.0 {
            [-q.i, -q.j, -q.k, -q.w]
        } else {
            [q.i, q.j, q.k, q.w]
        }
    }

    pub fn orthonormality_defect(&self) -> f64 {
        let d = self.rotation.transpose() * self.rotation - Matrix3::identity();
        d.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let s_vec = vee(&(self.rotation - self.rotation.transpose())) * 0.5;
        s_vec.norm().atan2(c)
    }
}

impl Serialize for SE3Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PoseQuat::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SE3Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let pq = PoseQuat::deserialize(deserializer)?;
        Ok(pq.to_pose())
    }
}

/// Wire form of a pose: unit quaternion (x, y, z, w) plus translation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PoseQuat {
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl From<&SE3Pose> for PoseQuat {
    fn from(pose: &SE3Pose) -> Self {
        let [qx, qy, qz, qw] = pose.quaternion_xyzw();
        Self {
            qx,
            qy,
            qz,
            qw,
            tx: pose.translation.x,
            ty: pose.translation.y,
            tz: pose.translation.z,
        }
    }
}

impl PoseQuat {
    pub fn to_pose(&self) -> SE3Pose {
        SE3Pose::from_quaternion_translation(
            self.qx,
            self.qy,
            self.qz,
            self.qw,
            Vector3::new(self.tx, self.ty, self.tz),
        )
    }
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose(a: &SE3Pose, b: &SE3Pose) -> SE3Pose {
    SE3Pose::from_parts(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

pub fn inverse(t: &SE3Pose) -> SE3Pose {
    let rt = t.rotation.transpose();
    SE3Pose::from_parts(rt, -(rt * t.translation))
}

pub fn transform_point(t: &SE3Pose, p: &Vector3<f64>) -> Vector3<f64> {
    t.rotation * p + t.translation
}

/// Skew-symmetric matrix such that `skew(v) * w == v.cross(w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map se(3) -> SE(3): Rodrigues on the rotational part and the
/// closed-form V matrix on the translational part.
pub fn exp(xi: &Twist) -> SE3Pose {
    let phi = xi.rotation;
    let theta = phi.norm();
    let k = skew(&phi);
    let k2 = k * k;
    let (rotation, v) = if theta < SMALL_ANGLE {
        // Series truncation error is O(theta^3), below f64 resolution here.
        let r = Matrix3::identity() + k + k2 * 0.5;
        let v = Matrix3::identity() + k * 0.5 + k2 * (1.0 / 6.0);
        (r, v)
    } else {
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / t2;
        let c = (theta - theta.sin()) / (t2 * theta);
        let r = Matrix3::identity() + k * a + k2 * b;
        let v = Matrix3::identity() + k * b + k2 * c;
        (r, v)
    };
    SE3Pose::from_parts(rotation, v * xi.translation)
}

/// Logarithm map SE(3) -> se(3). Fails within 1e-6 of a half-turn where the
/// rotation axis becomes numerically unobservable.
pub fn log(t: &SE3Pose) -> Result<Twist, GeometryError> {
    let theta = t.rotation_angle();
    let margin = std::f64::consts::PI - theta;
    if margin < 1e-6 {
        return Err(GeometryError::LogNearSingular {
            angle: theta,
            margin,
        });
    }
    let half_dev = vee(&(t.rotation - t.rotation.transpose())) * 0.5; // sin(theta) * axis
    let phi = if theta < SMALL_ANGLE {
        half_dev
    } else {
        half_dev * (theta / theta.sin())
    };
    let k = skew(&phi);
    let k2 = k * k;
    let v_inv = if theta < SMALL_ANGLE {
        Matrix3::identity() - k * 0.5 + k2 * (1.0 / 12.0)
    } else {
        let t2 = theta * theta;
        let coef = (1.0 - (theta * 0.5) * (theta * 0.5).cos() / (theta * 0.5).sin()) / t2;
        Matrix3::identity() - k * 0.5 + k2 * coef
    };
    Ok(Twist::new(phi, v_inv * t.translation))
}

/// Closest rotation matrix in the Frobenius sense (polar decomposition via
/// SVD, with determinant correction).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        r = u * flip * v_t;
    }
    r
}
