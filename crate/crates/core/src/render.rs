//! Face rendering and compositing.
//!
//! A fitted face mesh is rasterized into each camera with its texture and
//! blended into the frame by Poisson image editing: inside the face the
//! gradients come from the rendered texture, on the rim the values come from
//! the frame, so colour and brightness adapt to the scene.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraParams, Point3};
use crate::headfit::FittedHead;
use crate::mesh::TriMesh;
use crate::metrics::FaceBox;
use crate::visibility::VisibilityVerdict;

pub type Image = RgbImage;

pub const MIN_TEXTURE_SIDE: u32 = 64;
/// Largest acceptable max |A·x − b| of a blend, in 0–255 units.
pub const POISSON_RESIDUAL_BOUND: f64 = 1e-3;
/// CG stops once the residual max-norm falls below this; far tighter than the
/// bound so the rounded output does not depend on solver details.
const POISSON_TOLERANCE: f64 = 1e-7;
/// Triangles with a vertex closer than this to the camera plane are dropped (mm).
const NEAR_PLANE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("texture must be square with side >= {MIN_TEXTURE_SIDE}, got {0}x{1}")]
    InvalidTexture(u32, u32),
    #[error("mesh has no UV coordinates")]
    MissingUvs,
    #[error("camera {0}: face covers no pixel")]
    EmptyRender(String),
    #[error("blend mask has no interior pixel")]
    EmptyMask,
    #[error("box does not intersect the {0}x{1} image")]
    EmptyIntersection(u32, u32),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid kernel size {0}")]
    InvalidKernel(u32),
    #[error("Poisson solve stopped at residual {residual:e} after {iterations} iterations")]
    SolverResidual { residual: f64, iterations: usize },
    #[error("no texture assigned to person {0}")]
    MissingTexture(i64),
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceTexture {
    image: Image,
}

impl FaceTexture {
    pub fn new(image: Image) -> Result<Self, RenderError> {
        let (w, h) = image.dimensions();
        if w != h || w < MIN_TEXTURE_SIDE {
            return Err(RenderError::InvalidTexture(w, h));
        }
        Ok(Self { image })
    }

    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let img = image::open(path).map_err(|source| RenderError::Image {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(img.to_rgb8())
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    /// Synthetic frontal portrait laid out for the template's face UVs: skin
    /// with shading, hairline, brows, eyes, nose shadow and mouth. Tones and
    /// feature sizes vary with the seed.
    pub fn procedural(seed: u64, side: u32) -> Result<Self, RenderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skin = [
            rng.random_range(140.0..235.0f64),
            rng.random_range(100.0..190.0f64),
            rng.random_range(80.0..160.0f64),
        ];
        let hair = [
            rng.random_range(10.0..120.0f64),
            rng.random_range(10.0..90.0f64),
            rng.random_range(5.0..60.0f64),
        ];
        let iris = [
            rng.random_range(30.0..110.0f64),
            rng.random_range(40.0..130.0f64),
            rng.random_range(40.0..160.0f64),
        ];
        let eye_r = rng.random_range(0.035..0.05f64);
        let mouth_w = rng.random_range(0.08..0.13f64);
        let hairline = rng.random_range(0.12..0.22f64);
        let n = (side.max(1) - 1).max(1) as f64;
        let image = RgbImage::from_fn(side, side, |x, y| {
            let (u, v) = (x as f64 / n, y as f64 / n);
            let mix = |a: [f64; 3], b: [f64; 3], t: f64| {
                let t = t.clamp(0.0, 1.0);
                [0, 1, 2].map(|k| a[k] * (1.0 - t) + b[k] * t)
            };
            let blob = |cu: f64, cv: f64, ru: f64, rv: f64| {
                let d = ((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2);
                (1.0 - d).clamp(0.0, 1.0)
            };
            // Lambert-like falloff toward the sides of the face.
            let shade = 1.0 - 0.35 * ((u - 0.5) * 2.0).powi(2);
            let mut c = skin.map(|s| s * shade);
            c = mix(c, hair, (hairline - v) * 40.0);
            for side in [-1.0, 1.0] {
                let eu = 0.5 + side * 0.148;
                c = mix(
                    c,
                    [0.3 * hair[0], 0.3 * hair[1], 0.3 * hair[2]],
                    blob(eu, 0.36, 0.07, 0.012) * 3.0,
                );
                c = mix(
                    c,
                    [235.0, 235.0, 230.0],
                    blob(eu, 0.426, eye_r * 1.6, eye_r * 0.8) * 4.0,
                );
                c = mix(c, iris, blob(eu, 0.426, eye_r * 0.6, eye_r * 0.6) * 4.0);
            }
            c = mix(c, c.map(|v| v * 0.75), blob(0.5, 0.52, 0.03, 0.06) * 2.0);
            c = mix(c, [150.0, 60.0, 60.0], blob(0.5, 0.63, mouth_w, 0.02) * 3.0);
            Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
        });
        Self::new(image)
    }

    /// Bilinear lookup; `u` runs left to right, `v` top to bottom, both in [0, 1].
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let (w, h) = self.image.dimensions();
        let x = u.clamp(0.0, 1.0) * (w - 1) as f64;
        let y = v.clamp(0.0, 1.0) * (h - 1) as f64;
        let (x0, y0) = (x.floor() as u32, y.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let p = |x, y| self.image.get_pixel(x, y).0.map(f64::from);
        let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
        [0, 1, 2].map(|k| {
            (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
        })
    }
}

/// Per-pixel flags, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.data[y as usize * self.width as usize + x as usize] = on;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Tight `(x0, y0, x1, y1)` bounds of the set pixels, inclusive.
    pub fn bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let w = self.width as usize;
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &on)| on) {
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            b = Some(match b {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFace {
    pub camera_id: String,
    pub mask: Mask,
    /// Tight bounds of `mask`; confidence is 1 until a caller assigns one.
    pub bbox: FaceBox,
    /// Camera-frame depth per pixel, 0 where uncovered.
    pub depth_at_pixels: Vec<f64>,
    /// Texture colour at covered pixels, black elsewhere.
    pub color: Image,
}

/// Rasterizes a UV-mapped world-frame mesh. Triangles are double-sided and
/// resolved by a z-buffer; attributes are interpolated perspective-correctly
/// and pixel centers sit on integer coordinates.
pub fn rasterize_face(
    mesh: &TriMesh,
    texture: &FaceTexture,
    cam: &CameraParams,
) -> Result<RenderedFace, RenderError> {
    rasterize_face_occluded(mesh, None, texture, cam)
}

/// As [`rasterize_face`], but face pixels behind `occluder` are dropped. The
/// face wins depth ties, so an occluder sharing edges with the face does not
/// eat its border.
pub fn rasterize_face_occluded(
    mesh: &TriMesh,
    occluder: Option<&TriMesh>,
    texture: &FaceTexture,
    cam: &CameraParams,
) -> Result<RenderedFace, RenderError> {
    let uvs = mesh.uvs.as_ref().ok_or(RenderError::MissingUvs)?;
    let (w, h) = (cam.width, cam.height);
    let npx = w as usize * h as usize;
    let mut occ = vec![f64::INFINITY; npx];
    if let Some(o) = occluder {
        let cam_pts: Vec<_> = o.vertices.iter().map(|p| cam.extrinsic.apply(p)).collect();
        for tri in &o.triangles {
            scan_triangle(cam, tri.map(|i| cam_pts[i]), |i, z, _| {
                if z < occ[i] {
                    occ[i] = z;
                }
            });
        }
    }
    let mut zbuf = vec![f64::INFINITY; npx];
    let mut uvbuf = vec![[0.0f64; 2]; npx];
    let cam_pts: Vec<_> = mesh
        .vertices
        .iter()
        .map(|p| cam.extrinsic.apply(p))
        .collect();
    for tri in &mesh.triangles {
        let tuv = tri.map(|i| uvs[i]);
        scan_triangle(cam, tri.map(|i| cam_pts[i]), |i, z, persp| {
            if z < zbuf[i] && z <= occ[i] * (1.0 + 1e-9) {
                zbuf[i] = z;
                uvbuf[i] = [0, 1]
                    .map(|k| persp[0] * tuv[0][k] + persp[1] * tuv[1][k] + persp[2] * tuv[2][k]);
            }
        });
    }
    let mut mask = Mask::new(w, h);
    let mut color = RgbImage::new(w, h);
    let mut depth_at_pixels = vec![0.0; npx];
    for (i, &z) in zbuf.iter().enumerate() {
        if z.is_finite() {
            mask.data[i] = true;
            depth_at_pixels[i] = z;
            let c = texture.sample(uvbuf[i][0], uvbuf[i][1]);
            color.put_pixel(
                (i % w as usize) as u32,
                (i / w as usize) as u32,
                Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8)),
            );
        }
    }
    let (x0, y0, x1, y1) = mask
        .bounds()
        .ok_or_else(|| RenderError::EmptyRender(cam.camera_id.clone()))?;
    Ok(RenderedFace {
        camera_id: cam.camera_id.clone(),
        bbox: FaceBox::new(
            cam.camera_id.clone(),
            x0 as f64,
            y0 as f64,
            (x1 - x0 + 1) as f64,
            (y1 - y0 + 1) as f64,
            1.0,
        ),
        mask,
        depth_at_pixels,
        color,
    })
}

/// Visits the pixel centers covered by a camera-frame triangle with
/// `(pixel index, depth, perspective-correct barycentrics)`. Triangles that
/// cross the near plane or are degenerate on screen are skipped.
fn scan_triangle(cam: &CameraParams, pc: [Point3; 3], mut visit: impl FnMut(usize, f64, [f64; 3])) {
    if pc.iter().any(|p| p.z < NEAR_PLANE) {
        return;
    }
    let (w, h) = (cam.width, cam.height);
    let scr = pc.map(|p| {
        let px = cam.project_camera(&p).expect("in front of the camera");
        [px.u, px.v]
    });
    let area = edge(scr[0], scr[1], scr[2]);
    if area == 0.0 {
        return;
    }
    let lo_x = scr
        .iter()
        .map(|s| s[0])
        .fold(f64::INFINITY, f64::min)
        .ceil()
        .max(0.0);
    let hi_x = scr
        .iter()
        .map(|s| s[0])
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min(w as f64 - 1.0);
    let lo_y = scr
        .iter()
        .map(|s| s[1])
        .fold(f64::INFINITY, f64::min)
        .ceil()
        .max(0.0);
    let hi_y = scr
        .iter()
        .map(|s| s[1])
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min(h as f64 - 1.0);
    if lo_x > hi_x || lo_y > hi_y {
        return;
    }
    let inv_z = pc.map(|p| 1.0 / p.z);
    for y in lo_y as u32..=hi_y as u32 {
        for x in lo_x as u32..=hi_x as u32 {
            let q = [x as f64, y as f64];
            let l = [
                edge(scr[1], scr[2], q) / area,
                edge(scr[2], scr[0], q) / area,
                edge(scr[0], scr[1], q) / area,
            ];
            if l.iter().any(|&b| b < 0.0) {
                continue;
            }
            let iz = l[0] * inv_z[0] + l[1] * inv_z[1] + l[2] * inv_z[2];
            let z = 1.0 / iz;
            let persp = [0, 1, 2].map(|k| l[k] * inv_z[k] * z);
            visit(y as usize * w as usize + x as usize, z, persp);
        }
    }
}

/// Twice the signed area of `(a, b, c)`.
fn edge(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Unknowns of the Poisson system: mask pixels whose four neighbours are all
/// in the mask. Pixels on the image border never qualify.
pub fn blend_region(mask: &Mask) -> Vec<(u32, u32)> {
    let (w, h) = (mask.width, mask.height);
    let mut out = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if mask.get(x, y)
                && mask.get(x - 1, y)
                && mask.get(x + 1, y)
                && mask.get(x, y - 1)
                && mask.get(x, y + 1)
            {
                out.push((x, y));
            }
        }
    }
    out
}

/// Real-valued Poisson solution over [`blend_region`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonSolution {
    pub region: Vec<(u32, u32)>,
    /// Per channel, one value per region pixel.
    pub values: [Vec<f64>; 3],
    /// Per channel max |A·x − b|.
    pub residual: [f64; 3],
    pub iterations: [usize; 3],
}

/// Seamless cloning system for one channel: for each region pixel `p`,
/// `4·f_p − Σ_{q∈Ω} f_q = Σ_{q∉Ω} target_q + Σ_q (source_p − source_q)`
/// over the four neighbours `q`.
pub struct PoissonSystem {
    width: u32,
    /// Region index per pixel.
    index: Vec<Option<usize>>,
    region: Vec<(u32, u32)>,
}

const NEIGHBOURS: [(i32, i32); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

impl PoissonSystem {
    pub fn new(mask: &Mask) -> Self {
        let region = blend_region(mask);
        let mut index = vec![None; mask.width as usize * mask.height as usize];
        for (k, &(x, y)) in region.iter().enumerate() {
            index[y as usize * mask.width as usize + x as usize] = Some(k);
        }
        Self {
            width: mask.width,
            index,
            region,
        }
    }

    pub fn region(&self) -> &[(u32, u32)] {
        &self.region
    }

    fn at(&self, x: u32, y: u32) -> Option<usize> {
        self.index[y as usize * self.width as usize + x as usize]
    }

    fn neighbours(&self, x: u32, y: u32) -> impl Iterator<Item = (u32, u32)> {
        NEIGHBOURS
            .map(|(dx, dy)| ((x as i32 + dx) as u32, (y as i32 + dy) as u32))
            .into_iter()
    }

    /// Right-hand side for channel `c`.
    pub fn rhs(&self, target: &Image, source: &Image, c: usize) -> Vec<f64> {
        self.region
            .iter()
            .map(|&(x, y)| {
                let sp = source.get_pixel(x, y)[c] as f64;
                self.neighbours(x, y)
                    .map(|(qx, qy)| {
                        let guide = sp - source.get_pixel(qx, qy)[c] as f64;
                        let fixed = match self.at(qx, qy) {
                            Some(_) => 0.0,
                            None => target.get_pixel(qx, qy)[c] as f64,
                        };
                        guide + fixed
                    })
                    .sum()
            })
            .collect()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (k, &(px, py)) in self.region.iter().enumerate() {
            let mut v = 4.0 * x[k];
            for (qx, qy) in self.neighbours(px, py) {
                if let Some(j) = self.at(qx, qy) {
                    v -= x[j];
                }
            }
            out[k] = v;
        }
    }

    pub fn residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.apply(x, &mut ax);
        ax.iter()
            .zip(b)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Conjugate gradients from `x0`, stopping at `tol` (max-norm residual) or
    /// `max_iter`. Returns the iteration count.
    pub fn solve_cg(&self, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> usize {
        let n = b.len();
        let mut r = vec![0.0; n];
        self.apply(x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        for it in 0..max_iter {
            if r.iter().fold(0.0f64, |m, v| m.max(v.abs())) < tol {
                return it;
            }
            self.apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                return it;
            }
            let alpha = rr / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        max_iter
    }
}

pub fn poisson_iteration_cap(unknowns: usize) -> usize {
    (10.0 * (unknowns as f64).sqrt()).ceil() as usize + 200
}

/// Solves the seamless-cloning system per channel, starting from the target.
/// `mask` marks where `source` is defined.
pub fn poisson_solve(
    target: &Image,
    source: &Image,
    mask: &Mask,
) -> Result<PoissonSolution, RenderError> {
    let dims = target.dimensions();
    if source.dimensions() != dims || (mask.width, mask.height) != dims {
        return Err(RenderError::SizeMismatch(format!(
            "target {:?}, source {:?}, mask {:?}",
            dims,
            source.dimensions(),
            (mask.width, mask.height)
        )));
    }
    let sys = PoissonSystem::new(mask);
    if sys.region.is_empty() {
        return Err(RenderError::EmptyMask);
    }
    let cap = poisson_iteration_cap(sys.region.len());
    let mut values: [Vec<f64>; 3] = Default::default();
    let mut residual = [0.0; 3];
    let mut iterations = [0; 3];
    for c in 0..3 {
        let b = sys.rhs(target, source, c);
        let mut x: Vec<f64> = sys
            .region
            .iter()
            .map(|&(px, py)| target.get_pixel(px, py)[c] as f64)
            .collect();
        iterations[c] = sys.solve_cg(&b, &mut x, POISSON_TOLERANCE, cap);
        residual[c] = sys.residual(&x, &b);
        values[c] = x;
    }
    Ok(PoissonSolution {
        region: sys.region,
        values,
        residual,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blend {
    pub image: Image,
    pub residual: [f64; 3],
    /// Pixels written, all inside the mask.
    pub region: Vec<(u32, u32)>,
}

/// Seamless cloning of `source` into `target` over `mask`. Only mask pixels
/// with all four neighbours in the mask change; the rest of the mask supplies
/// the boundary values from `target`.
pub fn poisson_blend(target: &Image, source: &Image, mask: &Mask) -> Result<Blend, RenderError> {
    let sol = poisson_solve(target, source, mask)?;
    let worst = sol.residual.iter().copied().fold(0.0, f64::max);
    if !(worst < POISSON_RESIDUAL_BOUND) {
        return Err(RenderError::SolverResidual {
            residual: worst,
            iterations: sol.iterations.into_iter().max().unwrap_or(0),
        });
    }
    let mut image = target.clone();
    for (k, &(x, y)) in sol.region.iter().enumerate() {
        let px = image.get_pixel_mut(x, y);
        for c in 0..3 {
            px[c] = sol.values[c][k].round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(Blend {
        image,
        residual: sol.residual,
        region: sol.region,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "k")]
pub enum NaiveMethod {
    Blackout,
    Pixelize(u32),
    GaussianBlur(u32),
}

impl std::str::FromStr for NaiveMethod {
    type Err = String;

    /// `blackout`, `pixelize:K` or `blur:K`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (name, k) = match s.split_once(':') {
            Some((n, k)) => (
                n,
                Some(k.parse::<u32>().map_err(|e| format!("{s:?}: {e}"))?),
            ),
            None => (s, None),
        };
        match (name, k) {
            ("blackout", None) => Ok(Self::Blackout),
            ("pixelize", Some(k)) => Ok(Self::Pixelize(k)),
            ("blur", Some(k)) => Ok(Self::GaussianBlur(k)),
            _ => Err(format!(
                "unknown method {s:?}; expected blackout, pixelize:K or blur:K"
            )),
        }
    }
}

impl std::fmt::Display for NaiveMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Blackout => write!(f, "blackout"),
            Self::Pixelize(k) => write!(f, "pixelize:{k}"),
            Self::GaussianBlur(k) => write!(f, "blur:{k}"),
        }
    }
}

/// Normalized 1-D Gaussian of odd size `k` with the usual size-derived sigma.
pub fn gaussian_kernel(k: u32) -> Vec<f64> {
    let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let r = (k / 2) as f64;
    let w: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Replaces the box region with a naive anonymization. The blur reads only
/// pixels inside the box, clamping at its edges.
pub fn naive_anonymize(
    target: &Image,
    bbox: &FaceBox,
    method: NaiveMethod,
) -> Result<Image, RenderError> {
    let (w, h) = target.dimensions();
    let (x0, y0, x1, y1) = bbox
        .pixel_rect(w, h)
        .ok_or(RenderError::EmptyIntersection(w, h))?;
    let mut out = target.clone();
    match method {
        NaiveMethod::Blackout => {
            for y in y0..y1 {
                for x in x0..x1 {
                    out.put_pixel(x, y, Rgb([0, 0, 0]));
                }
            }
        }
        NaiveMethod::Pixelize(k) => {
            if k == 0 {
                return Err(RenderError::InvalidKernel(k));
            }
            for by in (y0..y1).step_by(k as usize) {
                for bx in (x0..x1).step_by(k as usize) {
                    let (ex, ey) = ((bx + k).min(x1), (by + k).min(y1));
                    let mut sum = [0.0f64; 3];
                    for y in by..ey {
                        for x in bx..ex {
                            let p = target.get_pixel(x, y);
                            for c in 0..3 {
                                sum[c] += p[c] as f64;
                            }
                        }
                    }
                    let n = ((ex - bx) * (ey - by)) as f64;
                    let mean = Rgb(sum.map(|s| (s / n).round() as u8));
                    for y in by..ey {
                        for x in bx..ex {
                            out.put_pixel(x, y, mean);
                        }
                    }
                }
            }
        }
        NaiveMethod::GaussianBlur(k) => {
            if k % 2 == 0 {
                return Err(RenderError::InvalidKernel(k));
            }
            let kern = gaussian_kernel(k);
            let r = (k / 2) as i64;
            let (rw, rh) = ((x1 - x0) as usize, (y1 - y0) as usize);
            let clamp = |v: i64, lo: u32, hi: u32| v.clamp(lo as i64, hi as i64 - 1) as u32;
            let mut tmp = vec![[0.0f64; 3]; rw * rh];
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut acc = [0.0; 3];
                    for (i, wgt) in kern.iter().enumerate() {
                        let p = target.get_pixel(clamp(x as i64 + i as i64 - r, x0, x1), y);
                        for c in 0..3 {
                            acc[c] += wgt * p[c] as f64;
                        }
                    }
                    tmp[(y - y0) as usize * rw + (x - x0) as usize] = acc;
                }
            }
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut acc = [0.0; 3];
                    for (i, wgt) in kern.iter().enumerate() {
                        let yy = clamp(y as i64 + i as i64 - r, y0, y1);
                        let p = tmp[(yy - y0) as usize * rw + (x - x0) as usize];
                        for c in 0..3 {
                            acc[c] += wgt * p[c];
                        }
                    }
                    out.put_pixel(x, y, Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8)));
                }
            }
        }
    }
    Ok(out)
}

/// Outcome for one person in one camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRender {
    pub camera_id: String,
    pub person_id: i64,
    pub status: RenderStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RenderStatus {
    Blended {
        bbox: FaceBox,
        residual: [f64; 3],
    },
    NotVisible,
    /// Visible by verdict but no pixel covered.
    EmptyRender,
    /// Rendered, but too thin to hold an interior pixel; the box is still reported.
    NoInterior {
        bbox: FaceBox,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnonymizedFrame {
    /// Same order as the input cameras.
    pub images: Vec<Image>,
    pub boxes: Vec<FaceBox>,
    /// Per camera, per person in ascending id order.
    pub renders: Vec<FaceRender>,
}

/// One camera's blended image, boxes and per-face statuses.
type CameraComposite = (Image, Vec<FaceBox>, Vec<FaceRender>);

/// Person id → texture index. Persons without an entry get textures round-robin
/// by their rank in ascending id order.
pub type TextureAssignment = BTreeMap<i64, usize>;

/// Renders and blends every visible face into every camera. `verdicts[p][c]`
/// is person `p`'s verdict for camera `c`. Within an image, faces composite in
/// ascending person id.
pub fn anonymize_frame(
    images: &[Image],
    cams: &[CameraParams],
    faces: &[FittedHead],
    verdicts: &[Vec<VisibilityVerdict>],
    textures: &[FaceTexture],
    assignment: &TextureAssignment,
) -> Result<AnonymizedFrame, RenderError> {
    if images.len() != cams.len() || verdicts.len() != faces.len() {
        return Err(RenderError::SizeMismatch(format!(
            "{} images for {} cameras, {} verdict lists for {} faces",
            images.len(),
            cams.len(),
            verdicts.len(),
            faces.len()
        )));
    }
    if let Some(v) = verdicts.iter().find(|v| v.len() != cams.len()) {
        return Err(RenderError::SizeMismatch(format!(
            "{} verdicts for {} cameras",
            v.len(),
            cams.len()
        )));
    }
    let mut order: Vec<usize> = (0..faces.len()).collect();
    order.sort_by_key(|&i| (faces[i].person_id, i));
    let texture_of = |rank: usize, id: i64| -> Result<&FaceTexture, RenderError> {
        let idx = match assignment.get(&id) {
            Some(&i) => i,
            None if !textures.is_empty() => rank % textures.len(),
            None => return Err(RenderError::MissingTexture(id)),
        };
        textures.get(idx).ok_or(RenderError::MissingTexture(id))
    };
    let assigned: Vec<&FaceTexture> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| texture_of(rank, faces[i].person_id))
        .collect::<Result<_, _>>()?;

    let per_cam: Vec<Result<CameraComposite, RenderError>> = cams
        .par_iter()
        .zip(images.par_iter())
        .enumerate()
        .map(|(c, (cam, img))| {
            let mut img = img.clone();
            let mut boxes = Vec::new();
            let mut renders = Vec::new();
            for (rank, &p) in order.iter().enumerate() {
                let face = &faces[p];
                let status = if !verdicts[p][c].visible {
                    RenderStatus::NotVisible
                } else {
                    match rasterize_face_occluded(
                        &face.face_mesh,
                        Some(&face.occluder),
                        assigned[rank],
                        cam,
                    ) {
                        Err(RenderError::EmptyRender(_)) => RenderStatus::EmptyRender,
                        Err(e) => return Err(e),
                        Ok(r) => {
                            let bbox = FaceBox {
                                confidence: face.confidence,
                                ..r.bbox
                            };
                            boxes.push(bbox.clone());
                            match poisson_blend(&img, &r.color, &r.mask) {
                                Ok(b) => {
                                    img = b.image;
                                    RenderStatus::Blended {
                                        bbox,
                                        residual: b.residual,
                                    }
                                }
                                Err(RenderError::EmptyMask) => RenderStatus::NoInterior { bbox },
                                Err(e) => return Err(e),
                            }
                        }
                    }
                };
                renders.push(FaceRender {
                    camera_id: cam.camera_id.clone(),
                    person_id: face.person_id,
                    status,
                });
            }
            Ok((img, boxes, renders))
        })
        .collect();
    let mut out = AnonymizedFrame {
        images: Vec::with_capacity(cams.len()),
        boxes: Vec::new(),
        renders: Vec::new(),
    };
    for r in per_cam {
        let (img, boxes, renders) = r?;
        out.images.push(img);
        out.boxes.extend(boxes);
        out.renders.extend(renders);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, RigidTransform};
    use crate::headfit::HeadModel;
    use nalgebra::{DMatrix, DVector, Vector3};

    fn cam(w: u32, h: u32) -> CameraParams {
        CameraParams::new(
            "cn01",
            500.0,
            500.0,
            (w / 2) as f64,
            (h / 2) as f64,
            RigidTransform::identity(),
            w,
            h,
        )
        .unwrap()
    }

    fn flat_texture(c: [u8; 3]) -> FaceTexture {
        FaceTexture::new(RgbImage::from_pixel(64, 64, Rgb(c))).unwrap()
    }

    fn tri_mesh(pts: [[f64; 3]; 3]) -> TriMesh {
        TriMesh::new(
            pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
            vec![[0, 1, 2]],
            Some(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        )
        .unwrap()
    }

    /// Signed distance (px) of `q` from the inside of a screen triangle; positive inside.
    fn inside_margin(s: [[f64; 2]; 3], q: [f64; 2]) -> f64 {
        let orient = edge(s[0], s[1], s[2]).signum();
        (0..3)
            .map(|i| {
                let (a, b) = (s[i], s[(i + 1) % 3]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                orient * ((b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])) / len
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn triangle_footprint_matches_analytic_half_spaces() {
        let cam = cam(200, 150);
        let z = 1000.0;
        // Screen vertices chosen off the pixel grid.
        let s = [[30.3, 20.7], [170.2, 40.1], [60.9, 130.4]];
        let pts = s.map(|[u, v]| [(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z]);
        let r = rasterize_face(&tri_mesh(pts), &flat_texture([9, 9, 9]), &cam).unwrap();
        for y in 0..150 {
            for x in 0..200 {
                let m = inside_margin(s, [x as f64, y as f64]);
                if m > 1.0 {
                    assert!(r.mask.get(x, y), "({x},{y}) inside by {m}");
                }
                if m < -1.0 {
                    assert!(!r.mask.get(x, y), "({x},{y}) outside by {m}");
                }
            }
        }
        let (x0, y0, x1, y1) = r.mask.bounds().unwrap();
        assert_eq!((r.bbox.x, r.bbox.y), (x0 as f64, y0 as f64));
        assert_eq!(
            (r.bbox.w, r.bbox.h),
            ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64)
        );
        assert_eq!(r.depth_at_pixels[80 * 200 + 80], z);
    }

    #[test]
    fn occluder_hides_face_but_loses_ties() {
        let face = tri_mesh([
            [-20.0, -20.0, 500.0],
            [20.0, -20.0, 500.0],
            [0.0, 20.0, 500.0],
        ]);
        let tex = flat_texture([9, 9, 9]);
        let alone = rasterize_face(&face, &tex, &cam(64, 64)).unwrap();
        let same = rasterize_face_occluded(&face, Some(&face), &tex, &cam(64, 64)).unwrap();
        assert_eq!(same.mask, alone.mask);
        let wall = tri_mesh([
            [-500.0, -500.0, 400.0],
            [500.0, -500.0, 400.0],
            [0.0, 500.0, 400.0],
        ]);
        assert!(matches!(
            rasterize_face_occluded(&face, Some(&wall), &tex, &cam(64, 64)),
            Err(RenderError::EmptyRender(_))
        ));
        let behind = tri_mesh([
            [-500.0, -500.0, 600.0],
            [500.0, -500.0, 600.0],
            [0.0, 500.0, 600.0],
        ]);
        let r = rasterize_face_occluded(&face, Some(&behind), &tex, &cam(64, 64)).unwrap();
        assert_eq!(r.mask, alone.mask);
    }

    #[test]
    fn behind_camera_is_empty() {
        let mesh = tri_mesh([[0.0, 0.0, -100.0], [10.0, 0.0, -100.0], [0.0, 10.0, -100.0]]);
        assert!(matches!(
            rasterize_face(&mesh, &flat_texture([1, 2, 3]), &cam(64, 64)),
            Err(RenderError::EmptyRender(_))
        ));
    }

    #[test]
    fn nearer_triangle_wins() {
        let far = [
            [-100.0, -100.0, 2000.0],
            [100.0, -100.0, 2000.0],
            [-100.0, 100.0, 2000.0],
        ];
        let near = far.map(|p| [p[0] / 2.0, p[1] / 2.0, 1000.0]);
        let mut mesh = tri_mesh(far);
        mesh.vertices
            .extend(near.iter().map(|p| Point3::new(p[0], p[1], p[2])));
        mesh.triangles.push([3, 4, 5]);
        // The near triangle samples the bottom-right texel, the far one the top-left.
        mesh.uvs = Some(
            vec![[0.0, 0.0]; 3]
                .into_iter()
                .chain(vec![[1.0, 1.0]; 3])
                .collect(),
        );
        let mut tex = RgbImage::from_pixel(64, 64, Rgb([0, 0, 255]));
        tex.put_pixel(63, 63, Rgb([255, 0, 0]));
        let tex = FaceTexture::new(tex).unwrap();
        // Both triangles render in either order.
        for flip in [false, true] {
            let mut m = mesh.clone();
            if flip {
                m.triangles.reverse();
            }
            let r = rasterize_face(&m, &tex, &cam(100, 100)).unwrap();
            assert_eq!(r.color.get_pixel(45, 45).0, [255, 0, 0]);
            assert_eq!(r.depth_at_pixels[45 * 100 + 45], 1000.0);
        }
    }

    #[test]
    fn perspective_correct_uv() {
        // A plane receding in depth: the screen midpoint of an edge is not its uv midpoint.
        let cam = cam(400, 100);
        let pts = [
            [-500.0, -50.0, 1000.0],
            [500.0, -50.0, 3000.0],
            [-500.0, 50.0, 1000.0],
        ];
        let mesh = tri_mesh(pts);
        let tex =
            FaceTexture::new(RgbImage::from_fn(256, 256, |x, _| Rgb([x as u8, 0, 0]))).unwrap();
        let r = rasterize_face(&mesh, &tex, &cam).unwrap();
        // Texture u equals the edge fraction a of A→B, and a point with u = a has
        // x/z = (-500 + 1000 a) / (1000 + 2000 a) = t on every row.
        for u in [60u32, 120, 180] {
            let t = (u as f64 - cam.cx) / cam.fx;
            let s = (500.0 + 1000.0 * t) / (1000.0 - 2000.0 * t);
            let got = r.color.get_pixel(u, cam.cy as u32)[0] as f64;
            assert!(
                (got - s * 255.0).abs() < 6.0,
                "u={u}: got {got}, want {}",
                s * 255.0
            );
        }
    }

    fn full_mask(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Mask {
        let mut m = Mask::new(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    fn noisy_image(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn identical_source_reproduces_target() {
        let t = noisy_image(1, 40, 30);
        let m = full_mask(40, 30, 5, 5, 30, 25);
        let b = poisson_blend(&t, &t, &m).unwrap();
        assert_eq!(b.image, t);
        assert_eq!(b.residual, [0.0; 3]);
    }

    #[test]
    fn constant_source_takes_boundary_constant() {
        let t = RgbImage::from_pixel(30, 30, Rgb([40, 90, 200]));
        let s = RgbImage::from_pixel(30, 30, Rgb([250, 10, 0]));
        let b = poisson_blend(&t, &s, &full_mask(30, 30, 3, 3, 27, 27)).unwrap();
        assert_eq!(b.image, t);
    }

    #[test]
    fn border_pixels_are_never_written() {
        let t = noisy_image(2, 20, 20);
        let s = noisy_image(3, 20, 20);
        let b = poisson_blend(&t, &s, &full_mask(20, 20, 0, 0, 20, 20)).unwrap();
        for (x, y, p) in b.image.enumerate_pixels() {
            if x == 0 || y == 0 || x == 19 || y == 19 {
                assert_eq!(p, t.get_pixel(x, y));
            }
        }
        assert_eq!(b.region.len(), 18 * 18);
    }

    #[test]
    fn empty_interior_is_rejected() {
        let t = RgbImage::new(10, 10);
        let mut m = Mask::new(10, 10);
        m.set(4, 4, true);
        assert!(matches!(
            poisson_blend(&t, &t, &m),
            Err(RenderError::EmptyMask)
        ));
    }

    /// Dense LU solve of the same system, assembled independently.
    fn dense_solve(t: &RgbImage, s: &RgbImage, m: &Mask, c: usize) -> (Vec<(u32, u32)>, Vec<f64>) {
        let inside = |x: u32, y: u32| {
            x > 0
                && y > 0
                && x + 1 < m.width
                && y + 1 < m.height
                && m.get(x, y)
                && m.get(x - 1, y)
                && m.get(x + 1, y)
                && m.get(x, y - 1)
                && m.get(x, y + 1)
        };
        let cells: Vec<(u32, u32)> = (0..m.height)
            .flat_map(|y| (0..m.width).map(move |x| (x, y)))
            .filter(|&(x, y)| inside(x, y))
            .collect();
        let n = cells.len();
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for (i, &(x, y)) in cells.iter().enumerate() {
            a[(i, i)] = 4.0;
            for (qx, qy) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                b[i] += s.get_pixel(x, y)[c] as f64 - s.get_pixel(qx, qy)[c] as f64;
                match cells.iter().position(|&p| p == (qx, qy)) {
                    Some(j) => a[(i, j)] = -1.0,
                    None => b[i] += t.get_pixel(qx, qy)[c] as f64,
                }
            }
        }
        let x = a.lu().solve(&b).unwrap();
        (cells, x.iter().copied().collect())
    }

    #[test]
    fn ramp_matches_dense_solve() {
        let t = RgbImage::from_pixel(40, 40, Rgb([100, 100, 100]));
        let s = RgbImage::from_fn(40, 40, |x, y| {
            Rgb([(4 * x) as u8, (3 * y) as u8, (2 * x + y) as u8])
        });
        // 32×32 mask; its 30×30 interior is solved.
        let m = full_mask(40, 40, 4, 4, 36, 36);
        let sol = poisson_solve(&t, &s, &m).unwrap();
        for c in 0..3 {
            let (cells, want) = dense_solve(&t, &s, &m, c);
            assert_eq!(cells, sol.region);
            let err = want
                .iter()
                .zip(&sol.values[c])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "channel {c}: {err}");
            assert!(sol.residual[c] < 1e-3);
            assert!(sol.iterations[c] <= poisson_iteration_cap(cells.len()));
        }
    }

    #[test]
    fn blackout_full_image() {
        let t = noisy_image(4, 16, 12);
        let out = naive_anonymize(
            &t,
            &FaceBox::new("c", 0.0, 0.0, 16.0, 12.0, 1.0),
            NaiveMethod::Blackout,
        )
        .unwrap();
        assert!(out.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn pixelize_single_block_is_mean() {
        let t = RgbImage::from_fn(10, 10, |x, y| Rgb([(x * 10) as u8, (y * 10) as u8, 7]));
        let b = FaceBox::new("c", 2.0, 3.0, 4.0, 4.0, 1.0);
        let out = naive_anonymize(&t, &b, NaiveMethod::Pixelize(4)).unwrap();
        // Mean of x·10 over x = 2..5 is 35, of y·10 over y = 3..6 is 45.
        for (x, y, p) in out.enumerate_pixels() {
            if (2..6).contains(&x) && (3..7).contains(&y) {
                assert_eq!(p.0, [35, 45, 7]);
            } else {
                assert_eq!(p, t.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn blur_leaves_constant_rect_unchanged() {
        let mut t = noisy_image(5, 30, 30);
        for y in 10..20 {
            for x in 8..22 {
                t.put_pixel(x, y, Rgb([77, 150, 3]));
            }
        }
        let b = FaceBox::new("c", 8.0, 10.0, 14.0, 10.0, 1.0);
        assert_eq!(
            naive_anonymize(&t, &b, NaiveMethod::GaussianBlur(61)).unwrap(),
            t
        );
        assert!(naive_anonymize(&t, &b, NaiveMethod::GaussianBlur(4)).is_err());
        let off = FaceBox::new("c", 40.0, 40.0, 5.0, 5.0, 1.0);
        assert!(matches!(
            naive_anonymize(&t, &off, NaiveMethod::Blackout),
            Err(RenderError::EmptyIntersection(..))
        ));
    }

    #[test]
    fn gaussian_kernel_sigma() {
        // k = 61: sigma = 0.3·29 + 0.8 = 9.5.
        let k = gaussian_kernel(61);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ratio = k[30 + 10] / k[30];
        assert!((ratio - (-100.0f64 / (2.0 * 9.5 * 9.5)).exp()).abs() < 1e-12);
    }

    #[test]
    fn naive_method_parsing() {
        assert_eq!(
            "blackout".parse::<NaiveMethod>().unwrap(),
            NaiveMethod::Blackout
        );
        assert_eq!(
            "pixelize:8".parse::<NaiveMethod>().unwrap(),
            NaiveMethod::Pixelize(8)
        );
        assert_eq!(
            "blur:61".parse::<NaiveMethod>().unwrap(),
            NaiveMethod::GaussianBlur(61)
        );
        assert!("blur".parse::<NaiveMethod>().is_err());
    }

    fn front_face() -> (CameraParams, FittedHead) {
        let cam = CameraParams::look_at(
            "cn01",
            Point3::new(0.0, -1500.0, 0.0),
            Point3::origin(),
            Vector3::z(),
            500.0,
            160,
            120,
        )
        .unwrap();
        let pose =
            RigidTransform::from_axis_angle(Vector3::z(), std::f64::consts::PI, Vector3::zeros());
        (
            cam,
            FittedHead::at_pose(&HeadModel::template(), pose, 3, 0.7),
        )
    }

    fn verdict(cam: &CameraParams, visible: bool) -> VisibilityVerdict {
        VisibilityVerdict {
            camera_id: cam.camera_id.clone(),
            visible,
            probes_total: 15,
            probes_visible: if visible { 15 } else { 0 },
            probes_outside_depth_fov: 0,
        }
    }

    #[test]
    fn frame_without_persons_is_untouched() {
        let (cam, _) = front_face();
        let img = noisy_image(6, 160, 120);
        let out = anonymize_frame(
            std::slice::from_ref(&img),
            &[cam],
            &[],
            &[],
            &[],
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(out.images[0], img);
        assert!(out.boxes.is_empty());
    }

    #[test]
    fn frame_changes_only_inside_the_face_box() {
        let (cam, face) = front_face();
        let img = noisy_image(7, 160, 120);
        let tex = FaceTexture::procedural(1, 128).unwrap();
        let v = vec![vec![verdict(&cam, true)]];
        let out = anonymize_frame(
            std::slice::from_ref(&img),
            std::slice::from_ref(&cam),
            std::slice::from_ref(&face),
            &v,
            std::slice::from_ref(&tex),
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(out.boxes.len(), 1);
        let b = &out.boxes[0];
        assert_eq!(b.confidence, 0.7);
        let (x0, y0, x1, y1) = b.pixel_rect(160, 120).unwrap();
        let mut changed = 0;
        for (x, y, p) in out.images[0].enumerate_pixels() {
            let inside = (x0..x1).contains(&x) && (y0..y1).contains(&y);
            if !inside {
                assert_eq!(p, img.get_pixel(x, y));
            } else if p != img.get_pixel(x, y) {
                changed += 1;
            }
        }
        assert!(changed > 100, "{changed}");

        let hidden = vec![vec![verdict(&cam, false)]];
        let out = anonymize_frame(
            std::slice::from_ref(&img),
            &[cam],
            &[face],
            &hidden,
            &[tex],
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(out.images[0], img);
        assert!(out.boxes.is_empty());
        assert_eq!(out.renders[0].status, RenderStatus::NotVisible);
    }

    #[test]
    fn procedural_textures_are_valid_and_seeded() {
        let a = FaceTexture::procedural(1, 64).unwrap();
        assert_eq!(a, FaceTexture::procedural(1, 64).unwrap());
        assert_ne!(a, FaceTexture::procedural(2, 64).unwrap());
        assert!(FaceTexture::new(RgbImage::new(64, 63)).is_err());
        assert!(FaceTexture::new(RgbImage::new(32, 32)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn bbox_is_tight_bound_of_mask(
            xy in proptest::prelude::prop::array::uniform6(-60.0..60.0f64),
            z in proptest::prelude::prop::array::uniform3(100.0..400.0f64),
        ) {
            let mesh = tri_mesh([[xy[0], xy[1], z[0]], [xy[2], xy[3], z[1]], [xy[4], xy[5], z[2]]]);
            match rasterize_face(&mesh, &flat_texture([5, 6, 7]), &cam(64, 48)) {
                Ok(r) => {
                    let (x0, y0, x1, y1) = r.mask.bounds().unwrap();
                    proptest::prop_assert_eq!((r.bbox.x, r.bbox.y), (x0 as f64, y0 as f64));
                    proptest::prop_assert_eq!((r.bbox.w, r.bbox.h), ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64));
                    for (i, &d) in r.depth_at_pixels.iter().enumerate() {
                        proptest::prop_assert_eq!(d > 0.0, r.mask.data[i]);
                    }
                }
                Err(e) => proptest::prop_assert!(matches!(e, RenderError::EmptyRender(_))),
            }
        }
    }
}
