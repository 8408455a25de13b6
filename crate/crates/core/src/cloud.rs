//! Depth maps, point clouds, cropping and mesh surface sampling.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{CameraParams, Point3};
use crate::mesh::TriMesh;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("depth map is {got_w}x{got_h} but camera {camera} expects {want_w}x{want_h}")]
    DimensionMismatch {
        camera: String,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("mesh has zero surface area")]
    DegenerateMesh,
    #[error("stride must be positive")]
    ZeroStride,
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
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

/// Per-pixel camera-frame depth in millimeters; 0 means no measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, d: f64) {
        self.data[y as usize * self.width as usize + x as usize] = d;
    }

    /// Reads a 16-bit single-channel PNG holding millimeters.
    pub fn load_png(path: &Path) -> Result<Self, CloudError> {
        let img = image::open(path).map_err(|source| CloudError::Image {
            path: path.display().to_string(),
            source,
        })?;
        let img = match img {
            image::DynamicImage::ImageLuma16(buf) => buf,
            other => {
                return Err(CloudError::Format {
                    path: path.display().to_string(),
                    reason: format!("expected 16-bit grayscale depth, found {:?}", other.color()),
                })
            }
        };
        Ok(Self {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as f64).collect(),
        })
    }

    /// Writes millimeters rounded to the nearest integer, saturating at 65535.
    pub fn save_png(&self, path: &Path) -> Result<(), CloudError> {
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|&d| d.round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, raw).expect("buffer size");
        img.save(path).map_err(|source| CloudError::Image {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Option<Aabb> {
        let first = *self.points.first()?;
        let (min, max) = self
            .points
            .iter()
            .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(Aabb { min, max })
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    /// Keeps at most `max_points`, chosen uniformly at random without
    /// replacement. Original order is preserved.
    pub fn downsample(&self, max_points: usize, seed: u64) -> PointCloud {
        if self.points.len() <= max_points {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = index::sample(&mut rng, self.points.len(), max_points).into_vec();
        keep.sort_unstable();
        PointCloud {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| keep.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Parses whitespace-separated `x y z` lines (mm). Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_xyz(text: &str, path: &str) -> Result<PointCloud, CloudError> {
        let mut points = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            match vals {
                Ok(v) if v.len() >= 3 => points.push(Point3::new(v[0], v[1], v[2])),
                _ => {
                    return Err(CloudError::Format {
                        path: path.to_string(),
                        reason: format!("line {}: expected `x y z`", ln + 1),
                    })
                }
            }
        }
        Ok(PointCloud::new(points))
    }

    pub fn load_xyz(path: &Path) -> Result<PointCloud, CloudError> {
        let text = fs::read_to_string(path).map_err(|source| CloudError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_xyz(&text, &path.display().to_string())
    }

    pub fn to_xyz(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 32);
        for p in &self.points {
            out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
        }
        out
    }

    pub fn save_xyz(&self, path: &Path) -> Result<(), CloudError> {
        fs::write(path, self.to_xyz()).map_err(|source| CloudError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Axis-aligned box, closed on both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    /// Panics unless `min ≤ max` componentwise.
    pub fn new(min: Point3, max: Point3) -> Self {
        assert!(
            min.x <= max.x && min.y <= max.y && min.z <= max.z,
            "Aabb min must not exceed max"
        );
        Self { min, max }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn center(&self) -> Point3 {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }
}

/// Unprojects every `stride`-th pixel with non-zero depth into the world frame.
/// Colors are attached when `rgb` is given.
pub fn depth_to_cloud(
    cam: &CameraParams,
    depth: &DepthMap,
    stride: u32,
    rgb: Option<&image::RgbImage>,
) -> Result<PointCloud, CloudError> {
    if stride == 0 {
        return Err(CloudError::ZeroStride);
    }
    if depth.width != cam.width || depth.height != cam.height {
        return Err(CloudError::DimensionMismatch {
            camera: cam.camera_id.clone(),
            got_w: depth.width,
            got_h: depth.height,
            want_w: cam.width,
            want_h: cam.height,
        });
    }
    let to_world = cam.extrinsic.inverse();
    let mut points = Vec::new();
    let mut colors = rgb.map(|_| Vec::new());
    for y in (0..depth.height).step_by(stride as usize) {
        for x in (0..depth.width).step_by(stride as usize) {
            let d = depth.get(x, y);
            if d > 0.0 {
                let pc = cam.unproject_camera(x as f64, y as f64, d);
                points.push(to_world.apply(&pc));
                if let (Some(colors), Some(img)) = (colors.as_mut(), rgb) {
                    colors.push(img.get_pixel(x, y).0);
                }
            }
        }
    }
    Ok(PointCloud { points, colors })
}

/// Concatenates clouds. Colors survive only if every input carries them.
pub fn merge(clouds: &[PointCloud]) -> PointCloud {
    let points = clouds
        .iter()
        .flat_map(|c| c.points.iter().copied())
        .collect();
    let colors = if !clouds.is_empty() && clouds.iter().all(|c| c.colors.is_some()) {
        Some(
            clouds
                .iter()
                .flat_map(|c| c.colors.as_ref().unwrap().iter().copied())
                .collect(),
        )
    } else {
        None
    };
    PointCloud { points, colors }
}

pub fn crop(cloud: &PointCloud, bbox: &Aabb) -> PointCloud {
    let keep: Vec<usize> = (0..cloud.points.len())
        .filter(|&i| bbox.contains(&cloud.points[i]))
        .collect();
    PointCloud {
        points: keep.iter().map(|&i| cloud.points[i]).collect(),
        colors: cloud
            .colors
            .as_ref()
            .map(|c| keep.iter().map(|&i| c[i]).collect()),
    }
}

/// Draws `n` points uniformly from the mesh surface: triangles by area, then
/// uniform barycentric coordinates. Deterministic for a given seed.
pub fn sample_mesh_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointCloud, CloudError> {
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(CloudError::DegenerateMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.random::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangle_points(t);
        let s = rng.random::<f64>().sqrt();
        let r = rng.random::<f64>();
        let p = a.coords * (1.0 - s) + b.coords * (s * (1.0 - r)) + c.coords * (s * r);
        points.push(Point3::from(p));
    }
    Ok(PointCloud::new(points))
}
