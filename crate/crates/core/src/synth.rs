//! Synthetic operating-room scenes with exact ground truth.
//!
//! Heads (the template mesh), body columns, a table, box occluders and the room
//! are ray cast into every camera. The same geometry yields noise-free probe
//! visibility, face boxes following the annotation guideline and exact
//! skeletons, so every stage of the pipeline can be checked against it.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Aabb, CloudError, DepthMap};
use crate::geometry::{
    save_calibration, CameraParams, DepthFovRect, GeometryError, Point3, RigidTransform,
};
use crate::headfit::{
    save_skeletons, skeleton_for_pose, HeadFitError, HeadModel, Joint, Keypoint, PersonRecord,
    Skeleton3D, SkeletonFrame,
};
use crate::mesh::TriMesh;
use crate::metrics::{BoxSet, FaceBox, MetricsError};
use crate::render::{FaceTexture, RenderError};

/// Annotation rule: the face counts when the view direction is within this
/// angle of the gaze (0° = looking into the camera).
pub const MAX_ANNOTATED_ANGLE_DEG: f64 = 135.0;
/// Annotation rule: minimum fraction of the face visible (unless an eye is).
pub const MIN_VISIBLE_FACE_FRACTION: f64 = 0.2;
/// Probe distances closer than this to the visibility threshold are ambiguous (mm).
pub const AMBIGUITY_MARGIN_MM: f64 = 25.0;
/// Body column top below the head center (mm).
pub const BODY_TOP_BELOW_HEAD: f64 = 240.0;
pub const BODY_RADIUS: f64 = 170.0;
/// Eye landmarks lie on the smooth head surface, up to the tessellation error off the mesh.
const EYE_REACH_TOL: f64 = 10.0;
const RAY_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    HeadFit(#[from] HeadFitError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonSpec {
    pub person_id: i64,
    /// Template → world.
    pub head_pose: RigidTransform,
    /// Height of the body column's top above the floor (mm).
    pub body_height: f64,
    pub confidence: f64,
    /// Seed of the procedural texture painted on the true face.
    pub texture_seed: u64,
}

impl PersonSpec {
    /// Standing person whose body column ends just below the head.
    pub fn standing(model: &HeadModel, person_id: i64, head_pose: RigidTransform) -> Self {
        let c = head_pose.apply(&model.head_center().expect("model has landmarks"));
        Self {
            person_id,
            head_pose,
            body_height: c.z - BODY_TOP_BELOW_HEAD,
            confidence: 1.0,
            texture_seed: 1000 + person_id as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub room: Aabb,
    pub table: Option<Aabb>,
    pub cameras: Vec<CameraParams>,
    pub persons: Vec<PersonSpec>,
    pub occluders: Vec<Aabb>,
    /// Gaussian depth noise (mm).
    pub noise_sigma: f64,
    /// Fraction of the image area outside the depth sensor's field of view.
    pub depth_fov_shrink: f64,
    /// Threshold used to flag ambiguous probes (mm).
    pub visibility_threshold: f64,
}

pub const ROOM_SIZE: [f64; 3] = [4500.0, 5500.0, 3000.0];
pub const IMAGE_SIZE: (u32, u32) = (640, 480);

pub fn default_room() -> Aabb {
    Aabb::new(
        Point3::origin(),
        Point3::new(ROOM_SIZE[0], ROOM_SIZE[1], ROOM_SIZE[2]),
    )
}

/// Operating table, long side along y, centered in the room.
pub fn default_table() -> Aabb {
    Aabb::new(
        Point3::new(1850.0, 1750.0, 0.0),
        Point3::new(2650.0, 3750.0, 900.0),
    )
}

/// Four ceiling cameras: wide views from the southwest (cn01), northeast (cn03)
/// and east (cn04) walls, and cn02 looking straight down on the table.
pub fn default_cameras(depth_fov_shrink: f64) -> Vec<CameraParams> {
    let (w, h) = IMAGE_SIZE;
    let target = Point3::new(2250.0, 2750.0, 1100.0);
    let mut cams = vec![
        CameraParams::look_at(
            "cn01",
            Point3::new(250.0, 250.0, 2700.0),
            target,
            Vector3::z(),
            420.0,
            w,
            h,
        ),
        CameraParams::look_at(
            "cn02",
            Point3::new(2250.0, 2750.0, 2950.0),
            Point3::new(2250.0, 2750.0, 0.0),
            Vector3::y(),
            400.0,
            w,
            h,
        ),
        CameraParams::look_at(
            "cn03",
            Point3::new(4250.0, 5250.0, 2700.0),
            target,
            Vector3::z(),
            420.0,
            w,
            h,
        ),
        CameraParams::look_at(
            "cn04",
            Point3::new(4300.0, 2750.0, 2600.0),
            target,
            Vector3::z(),
            420.0,
            w,
            h,
        ),
    ]
    .into_iter()
    .map(|c| c.expect("default camera is valid"))
    .collect::<Vec<_>>();
    for c in &mut cams {
        c.depth_fov_mask = Some(DepthFovRect::centered(w, h, depth_fov_shrink));
    }
    cams
}

impl SceneConfig {
    /// Empty room with the default table and cameras.
    pub fn empty(seed: u64) -> Self {
        let shrink = 0.6;
        Self {
            seed,
            room: default_room(),
            table: Some(default_table()),
            cameras: default_cameras(shrink),
            persons: Vec::new(),
            occluders: Vec::new(),
            noise_sigma: 0.0,
            depth_fov_shrink: shrink,
            visibility_threshold: crate::visibility::DEFAULT_THRESHOLD_MM,
        }
    }

    pub fn validate(&self, model: &HeadModel) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.cameras.is_empty() {
            return bad("at least one camera is required".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !(0.0..1.0).contains(&self.depth_fov_shrink) {
            return bad(format!(
                "depth_fov_shrink must be in [0, 1), got {}",
                self.depth_fov_shrink
            ));
        }
        if !(self.visibility_threshold > 0.0) {
            return bad("visibility_threshold must be positive".into());
        }
        for c in &self.cameras {
            c.validate()?;
            if !self.room.contains(&c.center()) {
                return bad(format!("camera {} is outside the room", c.camera_id));
            }
        }
        let mut ids: Vec<i64> = self.persons.iter().map(|p| p.person_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("person ids must be unique".into());
        }
        for p in &self.persons {
            if !(0.0..=1.0).contains(&p.confidence) {
                return bad(format!(
                    "person {}: confidence {}",
                    p.person_id, p.confidence
                ));
            }
            let c = p
                .head_pose
                .apply(&model.head_center().expect("model has landmarks"));
            if !self.room.contains(&c) {
                return bad(format!("person {}: head outside the room", p.person_id));
            }
            if !(p.body_height > 0.0 && p.body_height < c.z) {
                return bad(format!(
                    "person {}: body height {}",
                    p.person_id, p.body_height
                ));
            }
        }
        for o in &self.occluders {
            if !(0..3).all(|k| o.min[k] < o.max[k]) {
                return bad(format!("degenerate occluder {o:?}"));
            }
        }
        Ok(())
    }
}

/// What a ray hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Room,
    Table,
    Occluder(usize),
    Body(usize),
    /// Person index, triangle index and barycentric `(u, v)` of the hit.
    Head {
        person: usize,
        tri: usize,
        bary: (f64, f64),
        face: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub surface: Surface,
}

struct Column {
    center: (f64, f64),
    radius: f64,
    top: f64,
}

struct TriChunk {
    center: Point3,
    radius: f64,
    tris: std::ops::Range<usize>,
}

struct HeadInstance {
    mesh: TriMesh,
    face_tri: Vec<bool>,
    chunks: Vec<TriChunk>,
    center: Point3,
    radius: f64,
}

/// Ray caster over the scene geometry.
pub struct Scene {
    room: Aabb,
    table: Option<Aabb>,
    occluders: Vec<Aabb>,
    bodies: Vec<Column>,
    heads: Vec<HeadInstance>,
}

const CHUNK: usize = 24;

impl Scene {
    pub fn new(cfg: &SceneConfig, model: &HeadModel) -> Self {
        let mut is_face = vec![false; model.mesh.vertices.len()];
        for &i in &model.face_vertex_ids {
            is_face[i] = true;
        }
        let face_tri: Vec<bool> = model
            .mesh
            .triangles
            .iter()
            .map(|t| t.iter().all(|&i| is_face[i]))
            .collect();
        let heads = cfg
            .persons
            .iter()
            .map(|p| {
                let mesh = model.mesh.transformed(&p.head_pose);
                let chunks = (0..mesh.triangles.len())
                    .step_by(CHUNK)
                    .map(|s| {
                        let tris = s..(s + CHUNK).min(mesh.triangles.len());
                        let pts: Vec<Point3> =
                            tris.clone().flat_map(|t| mesh.triangle_points(t)).collect();
                        let (center, radius) = bounding_sphere(&pts);
                        TriChunk {
                            center,
                            radius,
                            tris,
                        }
                    })
                    .collect();
                let (center, radius) = bounding_sphere(&mesh.vertices);
                HeadInstance {
                    mesh,
                    face_tri: face_tri.clone(),
                    chunks,
                    center,
                    radius,
                }
            })
            .collect();
        let bodies = cfg
            .persons
            .iter()
            .map(|p| {
                let c = p
                    .head_pose
                    .apply(&model.head_center().expect("model has landmarks"));
                Column {
                    center: (c.x, c.y),
                    radius: BODY_RADIUS,
                    top: p.body_height,
                }
            })
            .collect();
        Self {
            room: cfg.room,
            table: cfg.table,
            occluders: cfg.occluders.clone(),
            bodies,
            heads,
        }
    }

    /// Nearest hit of `o + t·d` for `t > 0`. The room encloses every ray
    /// starting inside it, so only rays from outside can miss.
    pub fn cast(&self, o: &Point3, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = room_exit(&self.room, o, d).map(|(t, normal)| Hit {
            t,
            normal,
            surface: Surface::Room,
        });
        let mut take = |h: Option<Hit>| {
            if let Some(h) = h {
                if best.is_none_or(|b| h.t < b.t) {
                    best = Some(h);
                }
            }
        };
        if let Some(tb) = &self.table {
            take(box_entry(tb, o, d).map(|(t, normal)| Hit {
                t,
                normal,
                surface: Surface::Table,
            }));
        }
        for (i, b) in self.occluders.iter().enumerate() {
            take(box_entry(b, o, d).map(|(t, normal)| Hit {
                t,
                normal,
                surface: Surface::Occluder(i),
            }));
        }
        for (i, c) in self.bodies.iter().enumerate() {
            take(column_hit(c, o, d).map(|(t, normal)| Hit {
                t,
                normal,
                surface: Surface::Body(i),
            }));
        }
        for i in 0..self.heads.len() {
            take(self.cast_head(i, o, d));
        }
        best
    }

    /// Nearest hit on person `i`'s head alone.
    pub fn cast_head(&self, i: usize, o: &Point3, d: &Vector3<f64>) -> Option<Hit> {
        let h = &self.heads[i];
        if !ray_hits_sphere(o, d, &h.center, h.radius) {
            return None;
        }
        let mut best: Option<Hit> = None;
        for ch in &h.chunks {
            if !ray_hits_sphere(o, d, &ch.center, ch.radius) {
                continue;
            }
            for t in ch.tris.clone() {
                let [a, b, c] = h.mesh.triangle_points(t);
                if let Some((tt, u, v)) = ray_triangle(o, d, &a, &b, &c) {
                    if best.is_none_or(|bh| tt < bh.t) {
                        best = Some(Hit {
                            t: tt,
                            normal: (b - a).cross(&(c - a)).normalize(),
                            surface: Surface::Head {
                                person: i,
                                tri: t,
                                bary: (u, v),
                                face: h.face_tri[t],
                            },
                        });
                    }
                }
            }
        }
        best
    }
}

fn bounding_sphere(pts: &[Point3]) -> (Point3, f64) {
    let n = pts.len().max(1) as f64;
    let c = Point3::from(pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n);
    let r = pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    (c, r + 1e-6)
}

fn ray_hits_sphere(o: &Point3, d: &Vector3<f64>, c: &Point3, r: f64) -> bool {
    let oc = c - o;
    let dd = d.norm_squared();
    let tc = oc.dot(d) / dd;
    let closest = oc - d * tc.max(0.0);
    closest.norm_squared() <= r * r
}

/// Möller–Trumbore, double-sided. Returns `(t, u, v)` with barycentrics of `b` and `c`.
fn ray_triangle(
    o: &Point3,
    d: &Vector3<f64>,
    a: &Point3,
    b: &Point3,
    c: &Point3,
) -> Option<(f64, f64, f64)> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > RAY_EPS).then_some((t, u, v))
}

/// Exit point of a ray starting inside `b`.
fn room_exit(b: &Aabb, o: &Point3, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for k in 0..3 {
        if d[k] == 0.0 {
            continue;
        }
        let (bound, sign) = if d[k] > 0.0 {
            (b.max[k], -1.0)
        } else {
            (b.min[k], 1.0)
        };
        let t = (bound - o[k]) / d[k];
        if t > RAY_EPS && best.is_none_or(|(bt, _)| t < bt) {
            let mut n = Vector3::zeros();
            n[k] = sign;
            best = Some((t, n));
        }
    }
    best
}

/// Entry point of a ray into `b` from outside.
fn box_entry(b: &Aabb, o: &Point3, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < b.min[k] || o[k] > b.max[k] {
                return None;
            }
            continue;
        }
        let (mut a, mut c) = ((b.min[k] - o[k]) / d[k], (b.max[k] - o[k]) / d[k]);
        if a > c {
            std::mem::swap(&mut a, &mut c);
        }
        if a > t0 {
            t0 = a;
            axis = k;
        }
        t1 = t1.min(c);
    }
    if t0 > t1 || t0 <= RAY_EPS {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = -d[axis].signum();
    Some((t0, n))
}

/// Vertical column from the floor to `top`, side wall plus top cap.
fn column_hit(c: &Column, o: &Point3, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let (px, py) = (o.x - c.center.0, o.y - c.center.1);
    let a = d.x * d.x + d.y * d.y;
    if a > 0.0 {
        let b = 2.0 * (px * d.x + py * d.y);
        let cc = px * px + py * py - c.radius * c.radius;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = o.z + t * d.z;
            if t > RAY_EPS && z >= 0.0 && z <= c.top {
                let n = Vector3::new(px + t * d.x, py + t * d.y, 0.0) / c.radius;
                best = Some((t, n));
            }
        }
    }
    if d.z != 0.0 {
        let t = (c.top - o.z) / d.z;
        let (x, y) = (px + t * d.x, py + t * d.y);
        if t > RAY_EPS && x * x + y * y <= c.radius * c.radius && best.is_none_or(|(bt, _)| t < bt)
        {
            best = Some((t, Vector3::z()));
        }
    }
    best
}

/// Ground truth of one probe in one camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTruth {
    pub in_image: bool,
    pub in_depth_fov: bool,
    /// The first surface along the camera ray lies within the visibility
    /// threshold of the probe.
    pub visible: bool,
    /// A depth comparison at this probe could go either way: the ray through
    /// its pixel center disagrees with the exact ray, or either lands within
    /// the ambiguity margin of the visibility threshold.
    pub ambiguous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonView {
    pub camera_id: String,
    pub probes: Vec<ProbeTruth>,
    /// Some probe is visible.
    pub visible: bool,
    /// Pixels of the face with only the own head as occluder.
    pub face_pixels: usize,
    pub visible_face_pixels: usize,
    pub eye_visible: bool,
    /// Angle between the gaze and the direction to the camera.
    pub view_angle_deg: f64,
    /// Tight bounds of the visible face pixels, present when the face meets
    /// the annotation rule.
    pub bbox: Option<FaceBox>,
}

impl PersonView {
    /// Every in-image probe is inside the depth field of view and unambiguous.
    pub fn clean(&self) -> bool {
        self.probes
            .iter()
            .all(|p| !p.ambiguous && (!p.in_image || p.in_depth_fov))
    }

    /// Every in-image probe is outside the depth field of view, and at least one exists.
    pub fn outside_depth_fov(&self) -> bool {
        self.probes.iter().any(|p| p.in_image)
            && self.probes.iter().all(|p| !p.in_image || !p.in_depth_fov)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonTruth {
    pub person_id: i64,
    pub head_pose: RigidTransform,
    pub skeleton: Skeleton3D,
    /// Same order as the scene cameras.
    pub views: Vec<PersonView>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: CameraParams,
    pub depth: DepthMap,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub cameras: Vec<CameraView>,
    pub persons: Vec<PersonTruth>,
}

impl SceneTruth {
    pub fn truth_boxes(&self, frame: u64) -> BoxSet {
        let mut set = BoxSet::default();
        for c in &self.cameras {
            set.touch(frame, &c.camera.camera_id);
        }
        for p in &self.persons {
            for v in &p.views {
                if let Some(b) = &v.bbox {
                    set.push(frame, b.clone());
                }
            }
        }
        set
    }

    pub fn skeleton_frame(&self, frame: u64) -> SkeletonFrame {
        SkeletonFrame {
            frame,
            people: self
                .persons
                .iter()
                .map(|p| PersonRecord::from(&p.skeleton))
                .collect(),
        }
    }
}

/// Exact 17-joint skeleton: head joints and shoulders from the head pose, the
/// rest along the body column.
pub fn exact_skeleton(model: &HeadModel, p: &PersonSpec) -> Skeleton3D {
    let mut s = skeleton_for_pose(model, &p.head_pose, p.person_id, p.confidence);
    let c = p
        .head_pose
        .apply(&model.head_center().expect("model has landmarks"));
    let lateral = {
        let x = p.head_pose.rotation.column(0).into_owned();
        let h = Vector3::new(x.x, x.y, 0.0);
        if h.norm() > 1e-9 {
            h.normalize()
        } else {
            Vector3::x()
        }
    };
    let forward = Vector3::z().cross(&lateral);
    let top = p.body_height;
    let at = |side: f64, out: f64, fwd: f64, z: f64| Keypoint {
        position: Point3::new(c.x, c.y, z) + lateral * (side * out) + forward * fwd,
        confidence: 1.0,
    };
    use Joint::*;
    for (j, side) in [(LeftElbow, -1.0), (RightElbow, 1.0)] {
        s.joints[j as usize] = at(side, BODY_RADIUS + 40.0, 60.0, top - 280.0);
    }
    for (j, side) in [(LeftWrist, -1.0), (RightWrist, 1.0)] {
        s.joints[j as usize] = at(side, BODY_RADIUS, 260.0, top - 380.0);
    }
    for (j, side) in [(LeftHip, -1.0), (RightHip, 1.0)] {
        s.joints[j as usize] = at(side, 100.0, 0.0, top * 0.68);
    }
    for (j, side) in [(LeftKnee, -1.0), (RightKnee, 1.0)] {
        s.joints[j as usize] = at(side, 100.0, 20.0, top * 0.35);
    }
    for (j, side) in [(LeftAnkle, -1.0), (RightAnkle, 1.0)] {
        s.joints[j as usize] = at(side, 100.0, 0.0, 80.0);
    }
    s
}

/// Isotropic Gaussian jitter on every present joint; each joint's confidence
/// is multiplied by `exp(−‖jitter‖ / 100 mm)`.
pub fn perturb_skeleton(skel: &Skeleton3D, sigma_mm: f64, seed: u64) -> Skeleton3D {
    assert!(sigma_mm >= 0.0, "sigma must be >= 0, got {sigma_mm}");
    if sigma_mm == 0.0 {
        return skel.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma_mm).expect("finite sigma");
    let mut out = skel.clone();
    for k in out.joints.iter_mut().filter(|k| k.present()) {
        let j = Vector3::new(
            normal.sample(&mut rng),
            normal.sample(&mut rng),
            normal.sample(&mut rng),
        );
        k.position += j;
        k.confidence *= (-j.norm() / 100.0).exp();
    }
    out
}

fn room_color(h: &Hit) -> [f64; 3] {
    match h.surface {
        Surface::Room if h.normal.z > 0.5 => [110.0, 115.0, 120.0],
        Surface::Room if h.normal.z < -0.5 => [215.0, 215.0, 210.0],
        Surface::Room => [175.0, 185.0, 180.0],
        Surface::Table => [70.0, 120.0, 95.0],
        Surface::Occluder(_) => [230.0, 230.0, 235.0],
        Surface::Body(i) => [
            [60.0, 110.0, 160.0],
            [70.0, 140.0, 120.0],
            [90.0, 90.0, 150.0],
        ][i % 3],
        Surface::Head { .. } => [200.0, 160.0, 130.0],
    }
}

/// Renders one camera. Returns depth (noise-free), colour and the surface per pixel.
fn render_camera(
    scene: &Scene,
    cam: &CameraParams,
    textures: &[FaceTexture],
) -> (Vec<f64>, RgbImage, Vec<Option<Surface>>) {
    let (w, h) = (cam.width, cam.height);
    let o = cam.center();
    let mut depth = vec![0.0; (w * h) as usize];
    let mut surf = vec![None; (w * h) as usize];
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = cam.ray_direction(x as f64, y as f64);
            let Some(hit) = scene.cast(&o, &d) else {
                continue;
            };
            let i = (y * w + x) as usize;
            depth[i] = hit.t;
            surf[i] = Some(hit.surface);
            let base = match hit.surface {
                Surface::Head {
                    person,
                    tri,
                    bary,
                    face: true,
                } => {
                    let m = &scene.heads[person].mesh;
                    let uvs = m.uvs.as_ref().expect("template has uvs");
                    let [a, b, c] = m.triangles[tri];
                    let (u, v) = bary;
                    let uv =
                        [0, 1].map(|k| uvs[a][k] * (1.0 - u - v) + uvs[b][k] * u + uvs[c][k] * v);
                    textures[person].sample(uv[0], uv[1])
                }
                _ => room_color(&hit),
            };
            let shade = 0.35 + 0.65 * hit.normal.dot(&d.normalize()).abs();
            img.put_pixel(
                x,
                y,
                Rgb(base.map(|c| (c * shade).round().clamp(0.0, 255.0) as u8)),
            );
        }
    }
    (depth, img, surf)
}

/// Whether the ray from the camera center toward `p` reaches it.
fn reaches(scene: &Scene, o: &Point3, p: &Point3, tol: f64) -> bool {
    let d = p - o;
    scene
        .cast(o, &d)
        .is_none_or(|h| h.t >= 1.0 - tol / d.norm())
}

fn probe_truth(scene: &Scene, cam: &CameraParams, p: &Point3, threshold: f64) -> ProbeTruth {
    let o = cam.center();
    let px = cam.project(p);
    let idx = px.and_then(|px| px.index(cam.width, cam.height));
    let Some((x, y)) = idx else {
        return ProbeTruth {
            in_image: false,
            in_depth_fov: false,
            visible: false,
            ambiguous: false,
        };
    };
    // Noise-free depth test along the exact ray and through the pixel center
    // the visibility check reads. The exact ray decides; disagreement or a
    // distance within the margin of the threshold makes the probe ambiguous.
    let dist = |d: Vector3<f64>| scene.cast(&o, &d).map(|h| (o + d * h.t - p).norm());
    let exact = dist(p - o);
    let center = dist(cam.ray_direction(x as f64, y as f64));
    let visible = exact.is_none_or(|e| e < threshold);
    let ambiguous = [exact, center].iter().any(|d| match d {
        Some(d) => (*d < threshold) != visible || (d - threshold).abs() < AMBIGUITY_MARGIN_MM,
        None => true,
    });
    ProbeTruth {
        in_image: true,
        in_depth_fov: cam.in_depth_fov(x, y),
        visible,
        ambiguous,
    }
}

/// Renders the scene and derives all ground truth.
pub fn generate_scene(cfg: &SceneConfig, model: &HeadModel) -> Result<SceneTruth, SynthError> {
    cfg.validate(model)?;
    let scene = Scene::new(cfg, model);
    let textures: Vec<FaceTexture> = cfg
        .persons
        .iter()
        .map(|p| FaceTexture::procedural(p.texture_seed, 256))
        .collect::<Result<_, _>>()?;
    let lm = model.landmarks.expect("model has landmarks");
    let center = model.head_center().expect("model has landmarks");

    let rendered: Vec<(DepthMap, RgbImage, Vec<Option<Surface>>)> = cfg
        .cameras
        .par_iter()
        .enumerate()
        .map(|(ci, cam)| {
            let (clean, img, surf) = render_camera(&scene, cam, &textures);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000 + ci as u64));
            let noise =
                Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
            let mut depth = DepthMap::zeros(cam.width, cam.height);
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let d = clean[(y * cam.width + x) as usize];
                    let n: f64 = noise.sample(&mut rng);
                    if d > 0.0 && cam.in_depth_fov(x, y) {
                        let v = if cfg.noise_sigma > 0.0 { d + n } else { d };
                        depth.set(x, y, v.max(0.0));
                    }
                }
            }
            (depth, img, surf)
        })
        .collect();

    let persons = cfg
        .persons
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let probes: Vec<Point3> = model
                .probe_points()
                .iter()
                .map(|q| p.head_pose.apply(q))
                .collect();
            let eyes = [lm.left_eye, lm.right_eye]
                .map(|e| p.head_pose.apply(&Point3::new(e[0], e[1], e[2])));
            let hc = p.head_pose.apply(&center);
            let gaze = p.head_pose.rotation.column(1).into_owned();
            let views = cfg
                .cameras
                .par_iter()
                .zip(&rendered)
                .map(|(cam, (_, _, surf))| {
                    let o = cam.center();
                    let probes: Vec<ProbeTruth> = probes
                        .iter()
                        .map(|q| probe_truth(&scene, cam, q, cfg.visibility_threshold))
                        .collect();
                    let eye_visible = eyes.iter().any(|e| {
                        cam.project(e)
                            .and_then(|px| px.index(cam.width, cam.height))
                            .is_some()
                            && reaches(&scene, &o, e, EYE_REACH_TOL)
                    });
                    let (face_pixels, visible_face_pixels, bounds) =
                        face_pixels(&scene, cam, pi, surf);
                    let to_cam = (o - hc).normalize();
                    let view_angle_deg = gaze.dot(&to_cam).clamp(-1.0, 1.0).acos().to_degrees();
                    let annotated = view_angle_deg <= MAX_ANNOTATED_ANGLE_DEG
                        && visible_face_pixels > 0
                        && (visible_face_pixels as f64
                            >= MIN_VISIBLE_FACE_FRACTION * face_pixels as f64
                            || eye_visible);
                    let bbox = bounds.filter(|_| annotated).map(|(x0, y0, x1, y1)| {
                        FaceBox::new(
                            cam.camera_id.clone(),
                            x0 as f64,
                            y0 as f64,
                            (x1 - x0 + 1) as f64,
                            (y1 - y0 + 1) as f64,
                            1.0,
                        )
                    });
                    PersonView {
                        camera_id: cam.camera_id.clone(),
                        visible: probes.iter().any(|t| t.visible),
                        probes,
                        face_pixels,
                        visible_face_pixels,
                        eye_visible,
                        view_angle_deg,
                        bbox,
                    }
                })
                .collect();
            PersonTruth {
                person_id: p.person_id,
                head_pose: p.head_pose,
                skeleton: exact_skeleton(model, p),
                views,
            }
        })
        .collect();

    Ok(SceneTruth {
        cameras: cfg
            .cameras
            .iter()
            .zip(rendered)
            .map(|(cam, (depth, image, _))| CameraView {
                camera: cam.clone(),
                depth,
                image,
            })
            .collect(),
        persons,
    })
}

/// Inclusive pixel bounds `(x0, y0, x1, y1)`.
type PixelRect = (u32, u32, u32, u32);

/// Face pixels of person `pi`: total with only the own head in the way,
/// visible in the full scene, and the visible pixels' bounds.
fn face_pixels(
    scene: &Scene,
    cam: &CameraParams,
    pi: usize,
    surf: &[Option<Surface>],
) -> (usize, usize, Option<PixelRect>) {
    let head = &scene.heads[pi];
    let o = cam.center();
    let Some(rect) = sphere_rect(cam, &head.center, head.radius) else {
        return (0, 0, None);
    };
    let (mut total, mut visible) = (0, 0);
    let mut b: Option<PixelRect> = None;
    for y in rect.1..=rect.3 {
        for x in rect.0..=rect.2 {
            let d = cam.ray_direction(x as f64, y as f64);
            if let Some(Hit {
                surface: Surface::Head { face: true, .. },
                ..
            }) = scene.cast_head(pi, &o, &d)
            {
                total += 1;
            }
            if let Some(Surface::Head {
                person, face: true, ..
            }) = surf[(y * cam.width + x) as usize]
            {
                if person == pi {
                    visible += 1;
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
    }
    (total, visible, b)
}

/// Pixel rectangle covering a sphere's image, or the whole image when the
/// sphere reaches behind the camera. `None` if it is entirely behind or off-screen.
fn sphere_rect(cam: &CameraParams, c: &Point3, r: f64) -> Option<PixelRect> {
    let pc = cam.extrinsic.apply(c);
    let full = (0, 0, cam.width - 1, cam.height - 1);
    if pc.z <= -r {
        return None;
    }
    if pc.z - r <= 1.0 {
        return Some(full);
    }
    // Bound the projected disc by projecting the sphere's camera-space bounding box.
    let zn = pc.z - r;
    let xs = [
        (pc.x - r) / zn,
        (pc.x + r) / zn,
        (pc.x - r) / (pc.z + r),
        (pc.x + r) / (pc.z + r),
    ];
    let ys = [
        (pc.y - r) / zn,
        (pc.y + r) / zn,
        (pc.y - r) / (pc.z + r),
        (pc.y + r) / (pc.z + r),
    ];
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x0 = (cam.fx * min(&xs) + cam.cx).floor().max(0.0);
    let x1 = (cam.fx * max(&xs) + cam.cx)
        .ceil()
        .min(cam.width as f64 - 1.0);
    let y0 = (cam.fy * min(&ys) + cam.cy).floor().max(0.0);
    let y1 = (cam.fy * max(&ys) + cam.cy)
        .ceil()
        .min(cam.height as f64 - 1.0);
    (x0 <= x1 && y0 <= y1).then_some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

/// Head pose from a nose position and yaw/pitch/roll in radians. Yaw turns the
/// gaze counter-clockwise from +y, positive pitch looks down.
pub fn head_pose(nose: Point3, yaw: f64, pitch: f64, roll: f64) -> RigidTransform {
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), -pitch)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), roll);
    RigidTransform::new(*r.matrix(), nose.coords)
}

/// Knobs of [`random_scene`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSceneSpec {
    pub persons: usize,
    pub occluders: usize,
    pub noise_sigma: f64,
    /// Maximum yaw deviation from facing the table center (degrees).
    pub yaw_spread_deg: f64,
}

impl Default for RandomSceneSpec {
    fn default() -> Self {
        Self {
            persons: 3,
            occluders: 1,
            noise_sigma: 2.0,
            yaw_spread_deg: 50.0,
        }
    }
}

/// Persons standing around the table, looking roughly toward its center,
/// and lamp-sized box occluders hanging between cameras and heads.
pub fn random_scene(seed: u64, spec: &RandomSceneSpec, model: &HeadModel) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = SceneConfig::empty(seed);
    cfg.noise_sigma = spec.noise_sigma;
    let table = cfg.table.expect("default table");
    let tc = table.center();
    let center = model.head_center().expect("model has landmarks");
    let mut placed: Vec<Point3> = Vec::new();
    let mut attempts = 0;
    while placed.len() < spec.persons && attempts < 1000 {
        attempts += 1;
        // Point at a random distance outside the table footprint.
        let theta = rng.random_range(0.0..2.0 * PI);
        let gap = rng.random_range(BODY_RADIUS + 150.0..BODY_RADIUS + 550.0);
        let dir = Vector3::new(theta.cos(), theta.sin(), 0.0);
        let half = table.extent() / 2.0;
        let to_edge = (half.x / dir.x.abs().max(1e-9)).min(half.y / dir.y.abs().max(1e-9));
        let pos = tc + dir * (to_edge + gap);
        if placed
            .iter()
            .any(|q| ((q - pos).xy()).norm() < 2.0 * BODY_RADIUS + 250.0)
        {
            continue;
        }
        let wall = 400.0;
        if pos.x < wall
            || pos.y < wall
            || pos.x > ROOM_SIZE[0] - wall
            || pos.y > ROOM_SIZE[1] - wall
        {
            continue;
        }
        let face_table = {
            let d = tc - pos;
            (-d.x).atan2(d.y)
        };
        let yaw = face_table + rng.random_range(-1.0..=1.0) * spec.yaw_spread_deg.to_radians();
        let pitch = rng.random_range(0.0..25.0f64).to_radians();
        let roll = rng.random_range(-8.0..8.0f64).to_radians();
        let head_z = rng.random_range(1550.0..1800.0);
        // Place the head center over `pos`.
        let rot = head_pose(Point3::origin(), yaw, pitch, roll);
        let c_off = rot.apply(&center);
        let nose = Point3::new(pos.x - c_off.x, pos.y - c_off.y, head_z - c_off.z);
        let pose = head_pose(nose, yaw, pitch, roll);
        let id = placed.len() as i64 + 1;
        let mut p = PersonSpec::standing(model, id, pose);
        p.confidence = rng.random_range(0.6..1.0);
        cfg.persons.push(p);
        placed.push(Point3::new(pos.x, pos.y, head_z));
    }
    let mut attempts = 0;
    while cfg.occluders.len() < spec.occluders && attempts < 200 && !placed.is_empty() {
        attempts += 1;
        let cam = &cfg.cameras[rng.random_range(0..cfg.cameras.len())];
        let head = placed[rng.random_range(0..placed.len())];
        let f = rng.random_range(0.3..0.7);
        let c = cam.center() + (head - cam.center()) * f;
        let half = Vector3::new(
            rng.random_range(150.0..300.0),
            rng.random_range(150.0..300.0),
            40.0,
        );
        let clear = placed.iter().all(|q| (q - c).norm() > 450.0) && c.z - half.z > 1900.0;
        if clear {
            cfg.occluders.push(Aabb::new(c - half, c + half));
        }
    }
    cfg
}

/// Writes a dataset directory in the pipeline's input layout:
/// `calibration.json`, `cnXX/frame_NNNNNN.{png,depth.png}`, `skeletons.json`,
/// `ground_truth.json`, `truth.json`, `textures/` and the head model.
pub struct DatasetSummary {
    pub frames: usize,
    pub persons: usize,
    pub truth_boxes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub frames: usize,
    pub scene: RandomSceneSpec,
    /// Keypoint noise applied to the written skeletons (mm).
    pub skeleton_sigma: f64,
    pub textures: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 2,
            scene: RandomSceneSpec::default(),
            skeleton_sigma: 0.0,
            textures: 3,
        }
    }
}

#[derive(Serialize)]
struct TruthRecord {
    frame: u64,
    persons: Vec<TruthPerson>,
}

#[derive(Serialize)]
struct TruthPerson {
    id: i64,
    /// Template → world, row-major 4×4.
    head_pose: [[f64; 4]; 4],
    views: Vec<PersonView>,
}

pub fn frame_path(dir: &Path, camera_id: &str, frame: u64, depth: bool) -> std::path::PathBuf {
    let ext = if depth { "depth.png" } else { "png" };
    dir.join(camera_id).join(format!("frame_{frame:06}.{ext}"))
}

pub fn write_dataset(
    dir: &Path,
    spec: &DatasetSpec,
    model: &HeadModel,
) -> Result<DatasetSummary, SynthError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut skeletons = Vec::new();
    let mut truth_boxes = BoxSet::default();
    let mut records = Vec::new();
    let mut persons = 0;
    let mut cameras = None;
    for f in 0..spec.frames {
        let frame = f as u64;
        let cfg = random_scene(
            spec.seed.wrapping_mul(1_000_003).wrapping_add(frame),
            &spec.scene,
            model,
        );
        let truth = generate_scene(&cfg, model)?;
        for cv in &truth.cameras {
            let cdir = dir.join(&cv.camera.camera_id);
            fs::create_dir_all(&cdir).map_err(io(&cdir))?;
            let p = frame_path(dir, &cv.camera.camera_id, frame, false);
            cv.image.save(&p).map_err(|source| SynthError::Image {
                path: p.display().to_string(),
                source,
            })?;
            cv.depth
                .save_png(&frame_path(dir, &cv.camera.camera_id, frame, true))?;
        }
        let mut sf = truth.skeleton_frame(frame);
        for (k, rec) in sf.people.iter_mut().enumerate() {
            let skel = Skeleton3D::try_from(&*rec)?;
            let seed = spec.seed ^ (frame << 20) ^ k as u64;
            *rec = PersonRecord::from(&perturb_skeleton(&skel, spec.skeleton_sigma, seed));
        }
        skeletons.push(sf);
        for (fr, cams) in truth.truth_boxes(frame).frames {
            for (cam, boxes) in cams {
                truth_boxes.touch(fr, &cam);
                for b in boxes {
                    truth_boxes.push(fr, b);
                }
            }
        }
        records.push(TruthRecord {
            frame,
            persons: truth
                .persons
                .iter()
                .map(|p| TruthPerson {
                    id: p.person_id,
                    head_pose: p.head_pose.to_rows(),
                    views: p.views.clone(),
                })
                .collect(),
        });
        persons += truth.persons.len();
        cameras.get_or_insert(cfg.cameras);
    }
    if let Some(cams) = &cameras {
        save_calibration(&dir.join("calibration.json"), cams)?;
    }
    save_skeletons(&dir.join("skeletons.json"), &skeletons)?;
    truth_boxes.save(&dir.join("ground_truth.json"), false)?;
    let tpath = dir.join("truth.json");
    fs::write(
        &tpath,
        serde_json::to_string_pretty(&records).expect("truth serializes"),
    )
    .map_err(io(&tpath))?;
    let tdir = dir.join("textures");
    fs::create_dir_all(&tdir).map_err(io(&tdir))?;
    for k in 0..spec.textures {
        let tex = FaceTexture::procedural(spec.seed.wrapping_add(k as u64), 256)?;
        let p = tdir.join(format!("texture_{k:02}.png"));
        tex.image().save(&p).map_err(|source| SynthError::Image {
            path: p.display().to_string(),
            source,
        })?;
    }
    model.save(&dir.join("head.obj"), &dir.join("head.json"))?;
    Ok(DatasetSummary {
        frames: spec.frames,
        persons,
        truth_boxes: truth_boxes.len(),
    })
}
