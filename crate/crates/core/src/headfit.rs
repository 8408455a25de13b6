//! Head localization: skeleton input, the template head, keypoint-based pose
//! initialization and rigid fitting of the template to the scene cloud.
//!
//! Template frame: nose tip at the origin, gaze along +y, up along +z, the
//! subject's right ear on +x.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{crop, sample_mesh_surface, Aabb, CloudError, PointCloud};
use crate::geometry::{Point3, RigidTransform};
use crate::mesh::{MeshError, TriMesh};
use crate::register::{
    register_coarse_to_fine, GmmEmConfig, IcpConfig, RegistrationError, RegistrationResult,
};

pub const NUM_JOINTS: usize = 17;
pub const NUM_PROBES: usize = 15;

/// COCO-17 joint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum Joint {
    Nose = 0,
    LeftEye,
    RightEye,
    LeftEar,
    RightEar,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

#[derive(Debug, Error)]
pub enum HeadFitError {
    #[error("insufficient head keypoints: {0}")]
    InsufficientKeypoints(String),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("registration: {0}")]
    Registration(#[from] RegistrationError),
    #[error("invalid head model: {0}")]
    InvalidModel(String),
    #[error("invalid skeleton data: {0}")]
    InvalidSkeleton(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub position: Point3,
    /// In `[0, 1]`, or negative for a missing joint.
    pub confidence: f64,
}

impl Keypoint {
    pub const MISSING: Keypoint = Keypoint {
        position: Point3::new(0.0, 0.0, 0.0),
        confidence: -1.0,
    };

    pub fn present(&self) -> bool {
        self.confidence >= 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton3D {
    pub person_id: i64,
    pub joints: [Keypoint; NUM_JOINTS],
    pub frame_confidence: f64,
}

impl Skeleton3D {
    pub fn joint(&self, j: Joint) -> Option<Point3> {
        let k = &self.joints[j as usize];
        k.present().then_some(k.position)
    }

    pub fn transformed(&self, t: &RigidTransform) -> Skeleton3D {
        let mut out = self.clone();
        for k in out.joints.iter_mut().filter(|k| k.present()) {
            k.position = t.apply(&k.position);
        }
        out
    }

    pub fn validate(&self) -> Result<(), HeadFitError> {
        for (i, k) in self.joints.iter().enumerate() {
            let c = k.confidence;
            if !(c == -1.0 || (0.0..=1.0).contains(&c)) {
                return Err(HeadFitError::InvalidSkeleton(format!(
                    "person {} joint {i}: confidence {c} not in {{-1}} or [0, 1]",
                    self.person_id
                )));
            }
            if k.present() && !k.position.coords.iter().all(|v| v.is_finite()) {
                return Err(HeadFitError::InvalidSkeleton(format!(
                    "person {} joint {i}: non-finite position",
                    self.person_id
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.frame_confidence) {
            return Err(HeadFitError::InvalidSkeleton(format!(
                "person {}: confidence {} not in [0, 1]",
                self.person_id, self.frame_confidence
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub id: i64,
    pub confidence: f64,
    /// `[x, y, z, score]` per joint in COCO order.
    pub joints: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFrame {
    pub frame: u64,
    pub people: Vec<PersonRecord>,
}

impl TryFrom<&PersonRecord> for Skeleton3D {
    type Error = HeadFitError;

    fn try_from(r: &PersonRecord) -> Result<Self, Self::Error> {
        if r.joints.len() != NUM_JOINTS {
            return Err(HeadFitError::InvalidSkeleton(format!(
                "person {}: {} joints, expected {NUM_JOINTS}",
                r.id,
                r.joints.len()
            )));
        }
        let mut joints = [Keypoint::MISSING; NUM_JOINTS];
        for (k, j) in joints.iter_mut().zip(&r.joints) {
            *k = Keypoint {
                position: Point3::new(j[0], j[1], j[2]),
                confidence: j[3],
            };
        }
        let s = Skeleton3D {
            person_id: r.id,
            joints,
            frame_confidence: r.confidence,
        };
        s.validate()?;
        Ok(s)
    }
}

impl From<&Skeleton3D> for PersonRecord {
    fn from(s: &Skeleton3D) -> Self {
        PersonRecord {
            id: s.person_id,
            confidence: s.frame_confidence,
            joints: s
                .joints
                .iter()
                .map(|k| [k.position.x, k.position.y, k.position.z, k.confidence])
                .collect(),
        }
    }
}

pub fn load_skeletons(path: &Path) -> Result<Vec<SkeletonFrame>, HeadFitError> {
    let text = fs::read_to_string(path).map_err(|source| HeadFitError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let frames: Vec<SkeletonFrame> =
        serde_json::from_str(&text).map_err(|source| HeadFitError::Json {
            path: path.display().to_string(),
            source,
        })?;
    for f in &frames {
        for p in &f.people {
            Skeleton3D::try_from(p).map_err(|e| {
                HeadFitError::InvalidSkeleton(format!("{}: frame {}: {e}", path.display(), f.frame))
            })?;
        }
    }
    Ok(frames)
}

pub fn save_skeletons(path: &Path, frames: &[SkeletonFrame]) -> Result<(), HeadFitError> {
    let text = serde_json::to_string_pretty(frames).expect("skeleton frames serialize");
    fs::write(path, text).map_err(|source| HeadFitError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Canonical-frame positions of the head keypoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLandmarks {
    pub nose: [f64; 3],
    pub left_eye: [f64; 3],
    pub right_eye: [f64; 3],
    pub left_ear: [f64; 3],
    pub right_ear: [f64; 3],
}

impl HeadLandmarks {
    /// Landmarks in COCO order (nose, eyes, ears).
    pub fn points(&self) -> [Point3; 5] {
        [
            self.nose,
            self.left_eye,
            self.right_eye,
            self.left_ear,
            self.right_ear,
        ]
        .map(|p| Point3::new(p[0], p[1], p[2]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    pub mesh: TriMesh,
    /// Sorted, unique.
    pub face_vertex_ids: Vec<usize>,
    pub probe_vertex_ids: Vec<usize>,
    pub landmarks: Option<HeadLandmarks>,
}

#[derive(Serialize, Deserialize)]
struct HeadSidecar {
    face_vertex_ids: Vec<usize>,
    probe_vertex_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    landmarks: Option<HeadLandmarks>,
}

// Template dimensions (mm).
const AX: f64 = 70.0;
const AY: f64 = 105.0;
const AZ: f64 = 115.0;
const NOSE_H: f64 = 45.0;
const EAR_H: f64 = 40.0;
const FACE_FLAT: f64 = 18.0;
/// Angle from the bottom pole covered by the neck (rad).
const NECK_ANGLE: f64 = 0.8;
/// Fraction of the neck cap that forms the bottom disc.
const NECK_DISC: f64 = 0.35;
const NECK_LEN: f64 = 90.0;
const RINGS: usize = 24;
const SEGMENTS: usize = 48;
/// Face region: vertices whose direction from the head center has y above this.
const FACE_MIN_DY: f64 = 0.45;
/// Angular half-range of the cylindrical face UV map (rad).
const UV_HALF_RANGE: f64 = 1.15;
const EYE_DIR: (f64, f64) = (0.33, 0.17);

fn gauss2(a: f64, b: f64, sa: f64, sb: f64) -> f64 {
    (-(a * a / (2.0 * sa * sa) + b * b / (2.0 * sb * sb))).exp()
}

/// Template surface point for a unit direction from the head center.
fn template_surface(d: Vector3<f64>) -> Point3 {
    raw_surface(d) - raw_surface(Vector3::y()).coords
}

fn in_neck(d: &Vector3<f64>) -> bool {
    (-d.z).clamp(-1.0, 1.0).acos() < NECK_ANGLE
}

fn raw_surface(d: Vector3<f64>) -> Point3 {
    let alpha = (-d.z).clamp(-1.0, 1.0).acos();
    if alpha >= NECK_ANGLE {
        return skull_surface(d);
    }
    // Directions around the bottom pole form the neck: a wall hanging from the
    // skull at NECK_ANGLE, closed by a flat disc.
    let horiz = Vector3::new(d.x, d.y, 0.0);
    let horiz = if horiz.norm() > 0.0 {
        horiz.normalize()
    } else {
        Vector3::x()
    };
    let join_dir = horiz * NECK_ANGLE.sin() - Vector3::z() * NECK_ANGLE.cos();
    let join = skull_surface(join_dir);
    let beta = alpha / NECK_ANGLE;
    let center = Vector3::new(0.0, -(AY + NOSE_H), 0.0);
    if beta >= NECK_DISC {
        let drop = NECK_LEN * (1.0 - beta) / (1.0 - NECK_DISC);
        join - Vector3::z() * drop
    } else {
        let f = beta / NECK_DISC;
        let xy = (join.coords - center).xy() * f;
        Point3::new(center.x + xy.x, center.y + xy.y, join.z - NECK_LEN)
    }
}

fn skull_surface(d: Vector3<f64>) -> Point3 {
    let front = d.y.max(0.0).powi(2);
    let back = (-d.y).max(0.0);
    let mut p = Vector3::new(AX * d.x, AY * d.y, AZ * d.z);
    // Flattened face with nose, brow ridge, chin and eye sockets.
    p.y -= FACE_FLAT * front * front;
    p.y += front
        * (NOSE_H * gauss2(d.x, d.z + 0.04, 0.12, 0.16)
            + 14.0 * gauss2(d.x, d.z - 0.32, 0.30, 0.07)
            + 18.0 * gauss2(d.x, d.z + 0.55, 0.20, 0.07)
            - 9.0 * gauss2(d.x.abs() - EYE_DIR.0, d.z - EYE_DIR.1, 0.08, 0.07));
    // Occipital bulge.
    p.y -= 18.0 * back * gauss2(d.x, d.z - 0.2, 0.35, 0.3);
    p.x += d.x.signum() * EAR_H * gauss2(d.y + 0.05, d.z, 0.10, 0.16) * d.x.abs();
    Point3::from(Vector3::new(0.0, -(AY + NOSE_H), 0.0) + p)
}

/// Head center in the template frame.
fn template_center() -> Vector3<f64> {
    Vector3::new(0.0, -(AY + NOSE_H), 0.0) - raw_surface(Vector3::y()).coords
}

fn eye_direction(side: f64) -> Vector3<f64> {
    let (x, z) = EYE_DIR;
    Vector3::new(side * x, (1.0 - x * x - z * z).sqrt(), z)
}

fn sphere_dir(theta: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(
        theta.sin() * phi.cos(),
        theta.sin() * phi.sin(),
        theta.cos(),
    )
}

impl HeadModel {
    /// The built-in low-poly head (also shipped as `assets/head.obj` +
    /// `assets/head.json`).
    pub fn template() -> HeadModel {
        let mut dirs = vec![Vector3::z()];
        for i in 1..RINGS {
            let theta = std::f64::consts::PI * i as f64 / RINGS as f64;
            for j in 0..SEGMENTS {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / SEGMENTS as f64;
                dirs.push(sphere_dir(theta, phi));
            }
        }
        dirs.push(-Vector3::z());
        // Ring i = 12 / segment j = 12 is exactly the +y direction: the nose tip.
        let front = 1 + (RINGS / 2 - 1) * SEGMENTS + SEGMENTS / 4;
        dirs[front] = Vector3::y();

        let vertices: Vec<Point3> = dirs.iter().map(|&d| template_surface(d)).collect();
        let uvs = dirs
            .iter()
            .map(|d| {
                // Portrait convention: the subject's right (+x) lands on the image's left.
                let u = 0.5 - d.x.atan2(d.y) / (2.0 * UV_HALF_RANGE);
                let v = 0.5 - d.z.clamp(-1.0, 1.0).asin() / (2.0 * UV_HALF_RANGE);
                [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)]
            })
            .collect();

        let ring = |i: usize, j: usize| 1 + (i - 1) * SEGMENTS + j % SEGMENTS;
        let south = dirs.len() - 1;
        let mut triangles = Vec::new();
        for j in 0..SEGMENTS {
            triangles.push([0, ring(1, j), ring(1, j + 1)]);
        }
        for i in 1..RINGS - 1 {
            for j in 0..SEGMENTS {
                let (a, b, c, d) = (
                    ring(i, j),
                    ring(i, j + 1),
                    ring(i + 1, j),
                    ring(i + 1, j + 1),
                );
                triangles.push([a, c, d]);
                triangles.push([a, d, b]);
            }
        }
        for j in 0..SEGMENTS {
            triangles.push([south, ring(RINGS - 1, j + 1), ring(RINGS - 1, j)]);
        }
        let mesh = TriMesh::new(vertices, triangles, Some(uvs)).expect("template indices in range");

        let face_vertex_ids: Vec<usize> = (0..dirs.len())
            .filter(|&i| dirs[i].y > FACE_MIN_DY && !in_neck(&dirs[i]))
            .collect();
        let probe_vertex_ids = farthest_point_sample(&mesh.vertices, &face_vertex_ids, NUM_PROBES);

        let c = template_center();
        let ear = |side: f64| (c + Vector3::new(side * (AX + EAR_H), 0.0, 0.0)).into();
        let arr = |p: Point3| [p.x, p.y, p.z];
        let landmarks = HeadLandmarks {
            nose: [0.0, 0.0, 0.0],
            left_eye: arr(template_surface(eye_direction(-1.0))),
            right_eye: arr(template_surface(eye_direction(1.0))),
            left_ear: ear(-1.0),
            right_ear: ear(1.0),
        };
        HeadModel {
            mesh,
            face_vertex_ids,
            probe_vertex_ids,
            landmarks: Some(landmarks),
        }
    }

    pub fn validate(&self) -> Result<(), HeadFitError> {
        self.mesh.validate()?;
        let n = self.mesh.vertices.len();
        if self.mesh.uvs.is_none() {
            return Err(HeadFitError::InvalidModel("mesh has no UVs".into()));
        }
        if self.face_vertex_ids.is_empty() {
            return Err(HeadFitError::InvalidModel("empty face region".into()));
        }
        if self.face_vertex_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HeadFitError::InvalidModel(
                "face ids must be sorted and unique".into(),
            ));
        }
        if let Some(&i) = self.face_vertex_ids.iter().find(|&&i| i >= n) {
            return Err(HeadFitError::InvalidModel(format!(
                "face vertex {i} out of range ({n} vertices)"
            )));
        }
        if self.probe_vertex_ids.len() != NUM_PROBES {
            return Err(HeadFitError::InvalidModel(format!(
                "{} probe vertices, expected {NUM_PROBES}",
                self.probe_vertex_ids.len()
            )));
        }
        if let Some(&i) = self
            .probe_vertex_ids
            .iter()
            .find(|i| self.face_vertex_ids.binary_search(i).is_err())
        {
            return Err(HeadFitError::InvalidModel(format!(
                "probe vertex {i} is not a face vertex"
            )));
        }
        if let Some(t) =
            (0..self.mesh.triangles.len()).find(|&t| !(self.mesh.triangle_area(t) > 0.0))
        {
            return Err(HeadFitError::InvalidModel(format!(
                "triangle {t} has zero area"
            )));
        }
        Ok(())
    }

    /// Loads `<stem>.obj` + the JSON sidecar.
    pub fn load(obj: &Path, sidecar: &Path) -> Result<HeadModel, HeadFitError> {
        let mesh = TriMesh::load_obj(obj)?;
        let text = fs::read_to_string(sidecar).map_err(|source| HeadFitError::Io {
            path: sidecar.display().to_string(),
            source,
        })?;
        let side: HeadSidecar =
            serde_json::from_str(&text).map_err(|source| HeadFitError::Json {
                path: sidecar.display().to_string(),
                source,
            })?;
        let model = HeadModel {
            mesh,
            face_vertex_ids: side.face_vertex_ids,
            probe_vertex_ids: side.probe_vertex_ids,
            landmarks: side.landmarks,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, obj: &Path, sidecar: &Path) -> Result<(), HeadFitError> {
        self.mesh.save_obj(obj)?;
        let side = HeadSidecar {
            face_vertex_ids: self.face_vertex_ids.clone(),
            probe_vertex_ids: self.probe_vertex_ids.clone(),
            landmarks: self.landmarks,
        };
        fs::write(
            sidecar,
            serde_json::to_string_pretty(&side).expect("sidecar serializes"),
        )
        .map_err(|source| HeadFitError::Io {
            path: sidecar.display().to_string(),
            source,
        })
    }

    /// Face-region submesh (vertex order follows `face_vertex_ids`).
    pub fn face_mesh(&self) -> TriMesh {
        self.mesh.submesh(&self.face_vertex_ids).0
    }

    /// The head minus the face region: every triangle with a non-face vertex.
    /// Vertex ids match `mesh`; no UVs.
    pub fn rest_of_head(&self) -> TriMesh {
        let mut is_face = vec![false; self.mesh.vertices.len()];
        for &i in &self.face_vertex_ids {
            is_face[i] = true;
        }
        TriMesh {
            vertices: self.mesh.vertices.clone(),
            triangles: self
                .mesh
                .triangles
                .iter()
                .filter(|t| t.iter().any(|&i| !is_face[i]))
                .copied()
                .collect(),
            uvs: None,
        }
    }

    /// Midpoint of the ear landmarks, in the template frame.
    pub fn head_center(&self) -> Option<Point3> {
        let lm = self.landmarks?;
        let [_, _, _, l, r] = lm.points();
        Some(nalgebra::center(&l, &r))
    }

    pub fn probe_points(&self) -> Vec<Point3> {
        self.probe_vertex_ids
            .iter()
            .map(|&i| self.mesh.vertices[i])
            .collect()
    }
}

/// Farthest-point sampling over `candidates`, seeded with the candidate
/// nearest their centroid. Ties go to the lower vertex id.
fn farthest_point_sample(vertices: &[Point3], candidates: &[usize], k: usize) -> Vec<usize> {
    let centroid = candidates
        .iter()
        .fold(Vector3::zeros(), |acc, &i| acc + vertices[i].coords)
        / candidates.len() as f64;
    let first = *candidates
        .iter()
        .min_by(|&&a, &&b| {
            (vertices[a].coords - centroid)
                .norm_squared()
                .total_cmp(&(vertices[b].coords - centroid).norm_squared())
        })
        .expect("non-empty candidates");
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = candidates
        .iter()
        .map(|&i| (vertices[i] - vertices[first]).norm_squared())
        .collect();
    while chosen.len() < k.min(candidates.len()) {
        let mut best = 0;
        for c in 1..candidates.len() {
            if dist[c] > dist[best] {
                best = c;
            }
        }
        let v = candidates[best];
        chosen.push(v);
        for (d, &i) in dist.iter_mut().zip(candidates) {
            *d = d.min((vertices[i] - vertices[v]).norm_squared());
        }
    }
    chosen
}

fn mean(points: &[Point3]) -> Option<Vector3<f64>> {
    (!points.is_empty()).then(|| {
        points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords)
            / points.len() as f64
    })
}

fn unit(v: Vector3<f64>) -> Option<Vector3<f64>> {
    let n = v.norm();
    (n > 1e-9).then(|| v / n)
}

/// Keypoint-only head pose (template → world).
pub fn initial_head_pose(skel: &Skeleton3D) -> Result<RigidTransform, HeadFitError> {
    let nose = skel.joint(Joint::Nose);
    let eyes = [skel.joint(Joint::LeftEye), skel.joint(Joint::RightEye)];
    let ears = [skel.joint(Joint::LeftEar), skel.joint(Joint::RightEar)];
    let head: Vec<Point3> = std::iter::once(nose)
        .chain(eyes)
        .chain(ears)
        .flatten()
        .collect();
    if head.len() < 2 {
        return Err(HeadFitError::InsufficientKeypoints(format!(
            "person {}: {} of nose/eyes/ears present, need 2",
            skel.person_id,
            head.len()
        )));
    }
    let translation = match nose {
        Some(n) => n.coords,
        None => mean(&head[..]).expect("non-empty"),
    };

    let shoulders = (
        skel.joint(Joint::LeftShoulder),
        skel.joint(Joint::RightShoulder),
    );
    let up_hint = match shoulders {
        (Some(l), Some(r)) => unit(mean(&head).unwrap() - (l.coords + r.coords) / 2.0),
        _ => None,
    }
    .unwrap_or_else(Vector3::z);

    let pair = |p: [Option<Point3>; 2]| match p {
        [Some(l), Some(r)] => unit(r - l),
        _ => None,
    };
    let lateral_gaze = |lat: Option<Vector3<f64>>| lat.and_then(|x| unit(up_hint.cross(&x)));
    let front: Vec<Point3> = std::iter::once(nose).chain(eyes).flatten().collect();
    let back: Vec<Point3> = ears.into_iter().flatten().collect();
    let gaze = match (nose, ears) {
        (Some(n), [Some(l), Some(r)]) => unit(n.coords - (l.coords + r.coords) / 2.0),
        _ => None,
    }
    .or_else(|| lateral_gaze(pair(eyes)))
    .or_else(|| lateral_gaze(pair(ears)))
    .or_else(|| match (mean(&front), mean(&back)) {
        (Some(f), Some(b)) => unit(f - b),
        _ => None,
    })
    .or_else(|| match shoulders {
        (Some(l), Some(r)) => lateral_gaze(unit(r - l)),
        _ => None,
    })
    .ok_or_else(|| {
        HeadFitError::InsufficientKeypoints(format!(
            "person {}: gaze direction undetermined",
            skel.person_id
        ))
    })?;

    let orthogonal = |u: Vector3<f64>| unit(u - gaze * u.dot(&gaze));
    let up = orthogonal(up_hint)
        .or_else(|| orthogonal(Vector3::z()))
        .or_else(|| orthogonal(Vector3::x()))
        .expect("two independent fallbacks");
    let right = gaze.cross(&up);
    let rotation = Matrix3::from_columns(&[right, gaze, up]);
    Ok(RigidTransform::new(rotation, translation))
}

pub fn crop_box_for_head(pose: &RigidTransform, half_extent: f64) -> Aabb {
    assert!(
        half_extent > 0.0,
        "half_extent must be positive, got {half_extent}"
    );
    let c = Point3::from(pose.translation);
    let h = Vector3::repeat(half_extent);
    Aabb::new(c - h, c + h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub gmm: GmmEmConfig,
    pub icp: IcpConfig,
    pub half_extent: f64,
    pub head_samples: usize,
    pub max_scene_points: usize,
    pub min_crop_points: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        // The crop holds a partial shell of the head. A wide starting variance
        // drags the template toward the shell's centroid, and a wide ICP cap
        // matches the unseen back of the head to the visible side.
        Self {
            gmm: GmmEmConfig {
                sigma2_init: 400.0,
                ..GmmEmConfig::default()
            },
            icp: IcpConfig {
                max_corr_dist: 15.0,
                ..IcpConfig::default()
            },
            half_extent: 200.0,
            head_samples: 1500,
            max_scene_points: 8000,
            min_crop_points: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedHead {
    pub person_id: i64,
    /// Template → world.
    pub pose: RigidTransform,
    /// Face-region submesh in world coordinates, with UVs.
    pub face_mesh: TriMesh,
    /// Rest of the head in world coordinates; hides the face from behind.
    pub occluder: TriMesh,
    /// World positions of the probe vertices.
    pub probes: Vec<Point3>,
    pub confidence: f64,
    /// Absent when the pose comes from keypoints only.
    pub registration: Option<RegistrationResult>,
}

impl FittedHead {
    /// Places the model at `pose` without registration.
    pub fn at_pose(
        model: &HeadModel,
        pose: RigidTransform,
        person_id: i64,
        confidence: f64,
    ) -> FittedHead {
        FittedHead {
            person_id,
            pose,
            face_mesh: model.face_mesh().transformed(&pose),
            occluder: model.rest_of_head().transformed(&pose),
            probes: model.probe_points().iter().map(|p| pose.apply(p)).collect(),
            confidence,
            registration: None,
        }
    }

    pub fn low_confidence(&self) -> bool {
        self.registration.is_none()
    }
}

/// Registers the template head to the scene around the skeleton's head.
pub fn fit_head(
    skel: &Skeleton3D,
    scene: &PointCloud,
    model: &HeadModel,
    cfg: &FitConfig,
) -> Result<FittedHead, HeadFitError> {
    let init = initial_head_pose(skel)?;
    let cropped = crop(scene, &crop_box_for_head(&init, cfg.half_extent));
    if cropped.len() < cfg.min_crop_points {
        return Err(HeadFitError::FitFailed(format!(
            "person {}: crop holds {} points, need {}",
            skel.person_id,
            cropped.len(),
            cfg.min_crop_points
        )));
    }
    let fixed = cropped.downsample(cfg.max_scene_points, cfg.seed);
    // Sampled in the template frame so the draw does not depend on the pose.
    let template_samples = sample_mesh_surface(&model.mesh, cfg.head_samples, cfg.seed)?;
    let moving = PointCloud::new(
        template_samples
            .points
            .iter()
            .map(|p| init.apply(p))
            .collect(),
    );
    let reg = register_coarse_to_fine(&moving, &fixed, &cfg.gmm, &cfg.icp)?;
    let pose = reg.transform.compose(&init).orthonormalized();
    let mut fitted = FittedHead::at_pose(model, pose, skel.person_id, skel.frame_confidence);
    fitted.registration = Some(reg);
    Ok(fitted)
}

/// Exact skeleton for a head at `pose`: head joints from the template
/// landmarks, shoulders below the head center; body joints are left missing.
pub fn skeleton_for_pose(
    model: &HeadModel,
    pose: &RigidTransform,
    person_id: i64,
    confidence: f64,
) -> Skeleton3D {
    let lm = model.landmarks.expect("model has landmarks");
    let mut joints = [Keypoint::MISSING; NUM_JOINTS];
    for (j, p) in lm.points().iter().enumerate() {
        joints[j] = Keypoint {
            position: pose.apply(p),
            confidence: 1.0,
        };
    }
    let c = template_center();
    for (j, side) in [(Joint::LeftShoulder, -1.0), (Joint::RightShoulder, 1.0)] {
        joints[j as usize] = Keypoint {
            position: pose.apply(&Point3::from(
                c + Vector3::new(side * SHOULDER_HALF_WIDTH, 0.0, -SHOULDER_DROP),
            )),
            confidence: 1.0,
        };
    }
    Skeleton3D {
        person_id,
        joints,
        frame_confidence: confidence,
    }
}

/// Shoulder offsets from the head center in the template frame (mm).
pub const SHOULDER_HALF_WIDTH: f64 = 190.0;
pub const SHOULDER_DROP: f64 = 265.0;
