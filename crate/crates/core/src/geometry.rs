//! Rigid-body transforms in homogeneous coordinates and the 6-DoF pose
//! parameterization used by calibration and feature alignment.
//!
//! All geometry is `f64`; 32-bit floats only appear in feature payloads.
//! Rotations follow the intrinsic Z-Y-X Euler convention
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-entry tolerance for the orthonormality and determinant checks.
pub const RIGID_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),
    #[error("pose contains a non-finite value")]
    NonFinitePose,
    #[error("calibration file {path}: {source}")]
    CalibrationIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("calibration file {path}: {source}")]
    CalibrationFormat {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("calibration file {path}: transform for device {device} is invalid: {reason}")]
    CalibrationTransform {
        path: String,
        device: u16,
        reason: String,
    },
}

/// 6-DoF pose: translation in meters, intrinsic Z-Y-X Euler angles in radians
/// (yaw about z is applied last in the rotation composition).
///
/// The round trip through [`RigidTransform`] is unambiguous for
/// `pitch` in `(-pi/2, pi/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pose6DoF {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose6DoF {
    pub fn new(tx: f64, ty: f64, tz: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            tx,
            ty,
            tz,
            roll,
            pitch,
            yaw,
        }
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.tx, self.ty, self.tz]
    }

    pub fn is_finite(&self) -> bool {
        [self.tx, self.ty, self.tz, self.roll, self.pitch, self.yaw]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Pose as the 6-vector `(tx, ty, tz, roll, pitch, yaw)` used by the
    /// NDT optimizer.
    pub fn to_vector(&self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.roll, self.pitch, self.yaw]
    }

    pub fn from_vector(v: [f64; 6]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }
}

pub(crate) fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub(crate) fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub(crate) fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// 4x4 homogeneous rigid-body transform.
///
/// The upper-left 3x3 block is a rotation, the last column holds the
/// translation in meters, and the bottom row is exactly `[0, 0, 0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    m: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            m: Matrix4::identity(),
        }
    }

    /// Builds a transform from a rotation and translation without checking
    /// orthonormality. Callers must guarantee `r` is a rotation matrix.
    pub(crate) fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { m }
    }

    /// Validates and wraps a full 4x4 matrix.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, GeometryError> {
        let t = Self { m };
        t.validate()?;
        Ok(t)
    }

    /// Builds the transform realizing `p`: rotate by
    /// `Rz(yaw) * Ry(pitch) * Rx(roll)`, then translate.
    pub fn from_pose(p: &Pose6DoF) -> Self {
        let r = rot_z(p.yaw) * rot_y(p.pitch) * rot_x(p.roll);
        Self::from_parts(r, Vector3::new(p.tx, p.ty, p.tz))
    }

    /// Recovers the Z-Y-X Euler pose. Unambiguous for pitch away from
    /// +-pi/2; at the degenerate pitch the yaw/roll split is conventional
    /// (roll is folded into yaw).
    pub fn to_pose(&self) -> Pose6DoF {
        let r = self.rotation();
        let sy = -r[(2, 0)];
        let pitch = sy.clamp(-1.0, 1.0).asin();
        let (roll, yaw) = if sy.abs() < 1.0 - 1e-12 {
            (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
        } else {
            // Gimbal lock: only yaw - sign(sy)*roll is observable.
            (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
        };
        let t = self.translation();
        Pose6DoF::new(t[0], t[1], t[2], roll, pitch, yaw)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[(0, 3)], self.m[(1, 3)], self.m[(2, 3)]]
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self { m: self.m * other.m }
    }

    /// Closed-form inverse `[R^T, -R^T t]`; never a numeric 4x4 inversion.
    pub fn invert(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = self.translation();
        let ti = -(rt * Vector3::new(t[0], t[1], t[2]));
        Self::from_parts(rt, ti)
    }

    /// `R * p + t`.
    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.m;
        [
            r[(0, 0)] * p[0] + r[(0, 1)] * p[1] + r[(0, 2)] * p[2] + r[(0, 3)],
            r[(1, 0)] * p[0] + r[(1, 1)] * p[1] + r[(1, 2)] * p[2] + r[(1, 3)],
            r[(2, 0)] * p[0] + r[(2, 1)] * p[1] + r[(2, 2)] * p[2] + r[(2, 3)],
        ]
    }

    /// Re-projects the rotation block onto the orthonormal group via
    /// Gram-Schmidt, forcing the third axis right-handed. Used after
    /// optimizer updates and when ingesting external matrices.
    pub fn orthonormalized(&self) -> Self {
        let r = self.rotation();
        let c0 = r.column(0).normalize();
        let c1r = r.column(1) - c0 * r.column(1).dot(&c0);
        let c1 = c1r.normalize();
        let c2 = c0.cross(&c1);
        let r = Matrix3::from_columns(&[c0, c1, c2]);
        let t = self.translation();
        Self::from_parts(r, Vector3::new(t[0], t[1], t[2]))
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if !self.m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotRigid("non-finite entry".into()));
        }
        let bottom = [self.m[(3, 0)], self.m[(3, 1)], self.m[(3, 2)], self.m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::NotRigid(format!(
                "bottom row {:?} != [0, 0, 0, 1]",
                bottom
            )));
        }
        let r = self.rotation();
        let gram = r.transpose() * r;
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(i, j)] - expect).abs());
            }
        }
        if max_dev > RIGID_TOL {
            return Err(GeometryError::NotRigid(format!(
                "R^T R deviates from identity by {max_dev:.3e}"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > RIGID_TOL {
            return Err(GeometryError::NotRigid(format!("det(R) = {det}")));
        }
        Ok(())
    }

    /// Row-major 16-element flattening (the persistence layout).
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                out[i * 4 + j] = self.m[(i, j)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Result<Self, GeometryError> {
        let mut m = Matrix4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                m[(i, j)] = v[i * 4 + j];
            }
        }
        Self::from_matrix(m)
    }

    /// Rotation angle of `self.rotation()` in radians, for error metrics.
    pub fn rotation_angle(&self) -> f64 {
        let tr = self.rotation().trace();
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = <[f64; 16]>::deserialize(d)?;
        Self::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

/// Persistent calibration: per-device transform into the reference frame,
/// stored as 16 row-major numbers per device.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub reference_device: u16,
    pub transforms: BTreeMap<u16, RigidTransform>,
}

impl CalibrationFile {
    pub fn new(reference_device: u16) -> Self {
        let mut transforms = BTreeMap::new();
        transforms.insert(reference_device, RigidTransform::identity());
        Self {
            reference_device,
            transforms,
        }
    }

    /// Transform for `device` into the reference frame. The reference device
    /// implicitly maps to identity even when not stored.
    pub fn transform_for(&self, device: u16) -> Option<RigidTransform> {
        if let Some(t) = self.transforms.get(&device) {
            Some(*t)
        } else if device == self.reference_device {
            Some(RigidTransform::identity())
        } else {
            None
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| {
            GeometryError::CalibrationFormat {
                path: path.display().to_string(),
                source: e,
            }
        })?;
        std::fs::write(path, text).map_err(|e| GeometryError::CalibrationIo {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeometryError::CalibrationIo {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| GeometryError::CalibrationFormat {
            path: path.display().to_string(),
            source: e,
        })
    }
}
