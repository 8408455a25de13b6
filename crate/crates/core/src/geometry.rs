//! Pinhole cameras, rigid transforms and projection.
//!
//! Everything is in millimeters. Pixel coordinates put pixel centers on
//! integer values, so pixel `(i, j)` covers `[i - 0.5, i + 0.5)`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel has invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),
    #[error("invalid camera {id}: {reason}")]
    InvalidCamera { id: String, reason: String },
    #[error("calibration file {path}: {source}")]
    CalibrationIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("calibration file {path}: {source}")]
    CalibrationParse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Rotation followed by translation: `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, projecting `rotation` onto the nearest proper
    /// rotation first.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis`, then `translation`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Returns `self ∘ other`, i.e. applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Re-projects the rotation onto SO(3). Use after long composition chains.
    pub fn orthonormalized(&self) -> RigidTransform {
        RigidTransform {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Frobenius norm of `RᵀR - I`.
    pub fn orthogonality_defect(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix4();
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        out
    }

    /// Angle of the relative rotation between `self` and `other`, in degrees.
    pub fn rotation_error_deg(&self, other: &RigidTransform) -> f64 {
        rotation_angle(&(self.rotation * other.rotation.transpose())).to_degrees()
    }

    pub fn translation_error(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Rotation angle in radians of a (near) rotation matrix.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near 0; use the skew part there.
    let s = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    s.atan2(c)
}

/// Orthogonal polar factor of `m`, sign-corrected so the determinant is +1.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Image coordinates plus camera-frame depth. `d == 0` marks an invalid depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64, d: f64) -> Self {
        Self { u, v, d }
    }

    /// Integer pixel holding this position, if it lies within `width × height`.
    pub fn index(&self, width: u32, height: u32) -> Option<(u32, u32)> {
        let x = self.u.round();
        let y = self.v.round();
        if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
            Some((x as u32, y as u32))
        } else {
            None
        }
    }
}

/// Rectangular depth-sensor field of view in pixel coordinates, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthFovRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl DepthFovRect {
    /// Centered rectangle whose area is `1 - shrink` of the full image.
    pub fn centered(width: u32, height: u32, shrink: f64) -> Self {
        let scale = (1.0 - shrink).clamp(0.0, 1.0).sqrt();
        let w = (width as f64 * scale).round() as u32;
        let h = (height as f64 * scale).round() as u32;
        let x0 = (width - w) / 2;
        let y0 = (height - h) / 2;
        Self {
            x0,
            y0,
            x1: x0 + w.max(1) - 1,
            y1: y0 + h.max(1) - 1,
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraParams {
    pub camera_id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World → camera.
    pub extrinsic: RigidTransform,
    pub width: u32,
    pub height: u32,
    pub depth_fov_mask: Option<DepthFovRect>,
}

impl CameraParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        camera_id: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: RigidTransform,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            camera_id: camera_id.into(),
            fx,
            fy,
            cx,
            cy,
            extrinsic,
            width,
            height,
            depth_fov_mask: None,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let fail = |reason: String| {
            Err(GeometryError::InvalidCamera {
                id: self.camera_id.clone(),
                reason,
            })
        };
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return fail(format!(
                "focal lengths must be positive ({}, {})",
                self.fx, self.fy
            ));
        }
        if self.width == 0 || self.height == 0 {
            return fail("image size must be non-zero".into());
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return fail(format!(
                "principal point ({}, {}) outside image",
                self.cx, self.cy
            ));
        }
        let r = &self.extrinsic.rotation;
        if self.extrinsic.orthogonality_defect() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return fail("extrinsic rotation is not a proper rotation".into());
        }
        Ok(())
    }

    /// Builds a camera at `eye` looking at `target`. `up` fixes the roll; image
    /// y grows downward, so the camera's -y axis is aligned with `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        camera_id: impl Into<String>,
        eye: Point3,
        target: Point3,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::y());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows of world→camera rotation are the camera axes in world frame.
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let extrinsic = RigidTransform::new(rotation, -(rotation * eye.coords));
        Self::new(
            camera_id,
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            extrinsic,
            width,
            height,
        )
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        Point3::from(self.extrinsic.inverse().translation)
    }

    /// Projects a world point. `None` when the point is at or behind the
    /// camera plane (`z ≤ 0`).
    pub fn project(&self, p: &Point3) -> Option<Pixel> {
        let pc = self.extrinsic.apply(p);
        self.project_camera(&pc)
    }

    /// Projects a point already in the camera frame.
    pub fn project_camera(&self, pc: &Point3) -> Option<Pixel> {
        if pc.z <= 0.0 {
            return None;
        }
        Some(Pixel {
            u: self.fx * pc.x / pc.z + self.cx,
            v: self.fy * pc.y / pc.z + self.cy,
            d: pc.z,
        })
    }

    pub fn unproject(&self, px: &Pixel) -> Result<Point3, GeometryError> {
        if !(px.d > 0.0) {
            return Err(GeometryError::InvalidDepth(px.d));
        }
        let pc = self.unproject_camera(px.u, px.v, px.d);
        Ok(self.extrinsic.inverse().apply(&pc))
    }

    pub(crate) fn unproject_camera(&self, u: f64, v: f64, d: f64) -> Point3 {
        Point3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d)
    }

    /// World-frame ray direction through `(u, v)`, scaled so that the
    /// camera-frame z component is 1. A hit at parameter `t` has depth `t`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let dc = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.extrinsic.rotation.transpose() * dc
    }

    /// Whether the depth sensor covers pixel `(x, y)`.
    pub fn in_depth_fov(&self, x: u32, y: u32) -> bool {
        self.depth_fov_mask.is_none_or(|m| m.contains(x, y))
    }
}

/// On-disk camera record of the calibration file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraRecord {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major world→camera rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    /// Translation in mm.
    pub t: [f64; 3],
}

impl From<&CameraParams> for CameraRecord {
    fn from(cam: &CameraParams) -> Self {
        let m = &cam.extrinsic.rotation;
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = m[(row, col)];
            }
        }
        let t = cam.extrinsic.translation;
        CameraRecord {
            id: cam.camera_id.clone(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            r,
            t: [t.x, t.y, t.z],
        }
    }
}

impl TryFrom<&CameraRecord> for CameraParams {
    type Error = GeometryError;

    fn try_from(rec: &CameraRecord) -> Result<Self, GeometryError> {
        // Calibration files carry limited precision, so re-orthonormalize.
        let rotation = Matrix3::from_row_slice(&rec.r);
        let extrinsic = RigidTransform::new(rotation, Vector3::from(rec.t));
        if (rotation - extrinsic.rotation).norm() > 1e-3 {
            return Err(GeometryError::InvalidCamera {
                id: rec.id.clone(),
                reason: "R is not close to a rotation matrix".into(),
            });
        }
        CameraParams::new(
            &rec.id, rec.fx, rec.fy, rec.cx, rec.cy, extrinsic, rec.width, rec.height,
        )
    }
}

pub fn load_calibration(path: &Path) -> Result<Vec<CameraParams>, GeometryError> {
    let text = fs::read_to_string(path).map_err(|source| GeometryError::CalibrationIo {
        path: path.display().to_string(),
        source,
    })?;
    let records: Vec<CameraRecord> =
        serde_json::from_str(&text).map_err(|source| GeometryError::CalibrationParse {
            path: path.display().to_string(),
            source,
        })?;
    records.iter().map(CameraParams::try_from).collect()
}

pub fn save_calibration(path: &Path, cameras: &[CameraParams]) -> Result<(), GeometryError> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    let text = serde_json::to_string_pretty(&records).expect("calibration serializes");
    fs::write(path, text).map_err(|source| GeometryError::CalibrationIo {
        path: path.display().to_string(),
        source,
    })
}
