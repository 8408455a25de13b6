//! Dataset ingestion and the per-frame anonymization pipeline.
//!
//! A dataset directory holds `calibration.json`, one folder per camera with
//! `frame_NNNNNN.png` / `frame_NNNNNN.depth.png` pairs, a skeleton file, a
//! folder of face textures and the head model. Every frame is turned into a
//! merged point cloud, each skeleton's head is registered, visibility is
//! decided per camera and the visible faces are rendered and blended.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use image::RgbImage;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{depth_to_cloud, merge, CloudError, DepthMap, PointCloud};
use crate::geometry::{load_calibration, CameraParams, GeometryError};
use crate::headfit::{
    fit_head, initial_head_pose, load_skeletons, FitConfig, FittedHead, HeadFitError, HeadModel,
    Skeleton3D,
};
use crate::metrics::{
    crop_faces_for_quality, match_and_score, quality_report, render_table, BoxSet, EvalReport,
    FaceBox, MetricsError, QualityReport,
};
use crate::render::{
    anonymize_frame, naive_anonymize, FaceRender, FaceTexture, NaiveMethod, RenderError,
};
use crate::synth::frame_path;
use crate::visibility::{check_visibility, VisibilityVerdict, DEFAULT_THRESHOLD_MM};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    HeadFit(#[from] HeadFitError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Render(#[from] RenderError),
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
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    /// 2 for violated internal invariants, 1 for everything caused by inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Internal(_) | Self::Render(RenderError::SolverResidual { .. }) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.display().to_string();
    move |source| PipelineError::Io { path, source }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> PipelineError {
    let path = path.display().to_string();
    move |source| PipelineError::Image { path, source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub calibration: PathBuf,
    /// Holds one folder per camera.
    pub frames: PathBuf,
    pub skeletons: PathBuf,
    /// `*.png` files, used in file-name order.
    pub textures: PathBuf,
    /// Wavefront OBJ; the JSON sidecar sits next to it.
    pub head_model: PathBuf,
    pub output: PathBuf,
}

impl Paths {
    /// Conventional layout of a dataset directory.
    pub fn in_dataset(dir: &Path, output: &Path) -> Self {
        Self {
            calibration: dir.join("calibration.json"),
            frames: dir.to_path_buf(),
            skeletons: dir.join("skeletons.json"),
            textures: dir.join("textures"),
            head_model: dir.join("head.obj"),
            output: output.to_path_buf(),
        }
    }

    pub fn head_sidecar(&self) -> PathBuf {
        self.head_model.with_extension("json")
    }

    fn resolved(mut self, base: &Path) -> Self {
        for p in [
            &mut self.calibration,
            &mut self.frames,
            &mut self.skeletons,
            &mut self.textures,
            &mut self.head_model,
            &mut self.output,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_threshold")]
    pub visibility_threshold: f64,
    /// Pixel stride when turning depth maps into clouds.
    #[serde(default = "default_stride")]
    pub cloud_stride: u32,
    /// Replaces faces with a naive method inside the pipeline's boxes instead
    /// of rendering them: `blackout`, `pixelize:K` or `blur:K`.
    #[serde(default, with = "naive_str", skip_serializing_if = "Option::is_none")]
    pub naive: Option<NaiveMethod>,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD_MM
}

fn default_stride() -> u32 {
    1
}

mod naive_str {
    use super::NaiveMethod;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<NaiveMethod>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => s.serialize_str(&m.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveMethod>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| s.parse().map_err(D::Error::custom))
            .transpose()
    }
}

impl PipelineConfig {
    pub fn new(paths: Paths) -> Self {
        Self {
            paths,
            fit: FitConfig::default(),
            visibility_threshold: DEFAULT_THRESHOLD_MM,
            cloud_stride: 1,
            naive: None,
            jobs: 0,
            seed: 0,
        }
    }

    /// Parses a TOML file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self {
            paths: cfg.paths.resolved(base),
            ..cfg
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let p = &self.paths;
        for (name, path, dir) in [
            ("calibration", &p.calibration, false),
            ("frames", &p.frames, true),
            ("skeletons", &p.skeletons, false),
            ("textures", &p.textures, true),
            ("head_model", &p.head_model, false),
        ] {
            let ok = if dir { path.is_dir() } else { path.is_file() };
            if !ok {
                return bad(format!("paths.{name}: {} does not exist", path.display()));
            }
        }
        if !p.head_sidecar().is_file() {
            return bad(format!(
                "head model sidecar {} does not exist",
                p.head_sidecar().display()
            ));
        }
        if !(self.visibility_threshold > 0.0 && self.visibility_threshold.is_finite()) {
            return bad(format!(
                "visibility_threshold must be positive, got {}",
                self.visibility_threshold
            ));
        }
        if self.cloud_stride == 0 {
            return bad("cloud_stride must be >= 1".into());
        }
        if !(self.fit.half_extent > 0.0) {
            return bad(format!(
                "fit.half_extent must be positive, got {}",
                self.fit.half_extent
            ));
        }
        if self.fit.head_samples == 0 || self.fit.max_scene_points == 0 {
            return bad("fit.head_samples and fit.max_scene_points must be >= 1".into());
        }
        self.fit
            .gmm
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.fit
            .icp
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(m) = self.naive {
            let check = naive_anonymize(
                &RgbImage::new(1, 1),
                &FaceBox::new("", 0.0, 0.0, 1.0, 1.0, 1.0),
                m,
            );
            if let Err(e) = check {
                return bad(format!("naive method {m}: {e}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FitStatus {
    Registered {
        final_mse: f64,
        iterations: usize,
        converged: bool,
    },
    /// Registration failed; the face sits at the keypoint-only pose.
    Fallback { reason: String },
    /// Not even a keypoint pose exists; the person is not rendered.
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonResult {
    pub person_id: i64,
    pub confidence: f64,
    pub fit: FitStatus,
    /// Template → world, row-major; absent when the fit failed.
    pub pose: Option<[[f64; 4]; 4]>,
    /// One per camera; empty when the fit failed.
    pub verdicts: Vec<VisibilityVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraOutput {
    pub camera_id: String,
    /// Relative to the output directory.
    pub image: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub load: Duration,
    pub cloud: Duration,
    pub fit: Duration,
    pub visibility: Duration,
    pub render: Duration,
    pub write: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.load + self.cloud + self.fit + self.visibility + self.render + self.write
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: u64,
    /// One entry per calibrated camera.
    pub cameras: Vec<CameraOutput>,
    pub boxes: Vec<FaceBox>,
    pub persons: Vec<PersonResult>,
    pub renders: Vec<FaceRender>,
    /// Wall-clock times are logged, not written, so outputs stay reproducible.
    #[serde(skip)]
    pub timings: StageTimings,
}

/// Per-person registration seed derived from the run seed.
fn fit_seed(seed: u64, frame: u64, person_id: i64) -> u64 {
    // SplitMix64 finalizer over the combined key.
    let mut z = seed
        .wrapping_add(frame.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((person_id as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frame numbers with both a color and a depth image, per camera folder.
fn list_frames(dir: &Path) -> Result<BTreeSet<u64>, PipelineError> {
    let mut color = BTreeSet::new();
    let mut depth = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let name = entry.map_err(io_err(dir))?.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix("frame_") else {
            continue;
        };
        let (num, is_depth) = match rest.strip_suffix(".depth.png") {
            Some(n) => (n, true),
            None => match rest.strip_suffix(".png") {
                Some(n) => (n, false),
                None => continue,
            },
        };
        let Ok(n) = num.parse::<u64>() else { continue };
        if is_depth {
            depth.insert(n);
        } else {
            color.insert(n);
        }
    }
    if color != depth {
        let odd: Vec<u64> = color.symmetric_difference(&depth).copied().collect();
        return Err(PipelineError::Input(format!(
            "{}: frames {odd:?} lack a color or depth image",
            dir.display()
        )));
    }
    Ok(color)
}

fn load_textures(dir: &Path) -> Result<Vec<FaceTexture>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| FaceTexture::load(p).map_err(PipelineError::from))
        .collect()
}

fn load_image(path: &Path) -> Result<RgbImage, PipelineError> {
    Ok(image::open(path).map_err(img_err(path))?.to_rgb8())
}

/// Inputs shared by every frame.
struct Dataset {
    cams: Vec<CameraParams>,
    model: HeadModel,
    textures: Vec<FaceTexture>,
    frames: Vec<u64>,
    skeletons: BTreeMap<u64, Vec<Skeleton3D>>,
}

fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset, PipelineError> {
    let p = &cfg.paths;
    let cams = load_calibration(&p.calibration)?;
    if cams.is_empty() {
        return Err(PipelineError::Input(format!(
            "{}: no cameras",
            p.calibration.display()
        )));
    }
    let model = HeadModel::load(&p.head_model, &p.head_sidecar())?;
    let textures = load_textures(&p.textures)?;
    if textures.is_empty() {
        return Err(PipelineError::Input(format!(
            "{}: no *.png textures",
            p.textures.display()
        )));
    }

    let mut frames: Option<BTreeSet<u64>> = None;
    for c in &cams {
        let f = list_frames(&p.frames.join(&c.camera_id))?;
        match &frames {
            None => frames = Some(f),
            Some(prev) if *prev != f => {
                return Err(PipelineError::Input(format!(
                    "camera {} has frames {:?}, camera {} has {:?}",
                    cams[0].camera_id, prev, c.camera_id, f
                )))
            }
            Some(_) => {}
        }
    }
    let frames = frames.unwrap_or_default();

    let mut skeletons = BTreeMap::new();
    for sf in load_skeletons(&p.skeletons)? {
        if !frames.contains(&sf.frame) {
            return Err(PipelineError::Input(format!(
                "{}: frame {} has no images",
                p.skeletons.display(),
                sf.frame
            )));
        }
        let mut people = Vec::with_capacity(sf.people.len());
        let mut ids = BTreeSet::new();
        for rec in &sf.people {
            let s = Skeleton3D::try_from(rec)?;
            s.validate()?;
            if !ids.insert(s.person_id) {
                return Err(PipelineError::Input(format!(
                    "frame {}: person {} appears twice",
                    sf.frame, s.person_id
                )));
            }
            people.push(s);
        }
        skeletons.insert(sf.frame, people);
    }
    Ok(Dataset {
        cams,
        model,
        textures,
        frames: frames.into_iter().collect(),
        skeletons,
    })
}

/// Fits one person, falling back to the keypoint pose when registration fails
/// or wanders outside the crop box.
fn fit_person(
    skel: &Skeleton3D,
    cloud: &PointCloud,
    model: &HeadModel,
    fit: &FitConfig,
    frame: u64,
) -> (Option<FittedHead>, FitStatus) {
    let fallback = |reason: String| match initial_head_pose(skel) {
        Ok(pose) => {
            warn!(
                "frame {frame}, person {}: {reason}; using the keypoint pose",
                skel.person_id
            );
            (
                Some(FittedHead::at_pose(
                    model,
                    pose,
                    skel.person_id,
                    skel.frame_confidence,
                )),
                FitStatus::Fallback { reason },
            )
        }
        Err(e) => {
            warn!(
                "frame {frame}, person {}: {e}; not rendered",
                skel.person_id
            );
            (
                None,
                FitStatus::Failed {
                    reason: e.to_string(),
                },
            )
        }
    };
    match fit_head(skel, cloud, model, fit) {
        Ok(head) => {
            let init = initial_head_pose(skel).expect("fit succeeded from this pose");
            let drift = head.pose.translation_error(&init);
            if drift > fit.half_extent {
                return fallback(format!(
                    "registration drifted {drift:.0} mm, beyond the {:.0} mm crop",
                    fit.half_extent
                ));
            }
            let reg = head.registration.as_ref().expect("registered");
            let status = FitStatus::Registered {
                final_mse: reg.final_mse,
                iterations: reg.iterations_used,
                converged: reg.converged,
            };
            (Some(head), status)
        }
        Err(e) => fallback(e.to_string()),
    }
}

/// One decoded frame: per-camera images and depth maps in calibration order,
/// plus the frame's skeletons.
pub struct FrameInput<'a> {
    pub frame: u64,
    pub cams: &'a [CameraParams],
    pub images: &'a [RgbImage],
    pub depths: &'a [DepthMap],
    pub people: &'a [Skeleton3D],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    /// Same order as the cameras.
    pub images: Vec<RgbImage>,
    pub boxes: Vec<FaceBox>,
    pub persons: Vec<PersonResult>,
    pub renders: Vec<FaceRender>,
    pub timings: StageTimings,
}

/// Cloud, fit, visibility and rendering for one frame, without any file I/O.
/// `cfg.paths` is not used.
pub fn process_views(
    cfg: &PipelineConfig,
    model: &HeadModel,
    textures: &[FaceTexture],
    input: &FrameInput,
) -> Result<FrameOutput, PipelineError> {
    let FrameInput {
        frame,
        cams,
        images,
        depths,
        people,
    } = *input;
    if images.len() != cams.len() || depths.len() != cams.len() {
        return Err(PipelineError::Input(format!(
            "frame {frame}: {} images and {} depth maps for {} cameras",
            images.len(),
            depths.len(),
            cams.len()
        )));
    }
    for ((c, img), d) in cams.iter().zip(images).zip(depths) {
        if img.dimensions() != (c.width, c.height) || (d.width, d.height) != (c.width, c.height) {
            return Err(PipelineError::Input(format!(
                "frame {frame}: camera {} expects {}x{}, got image {}x{} and depth {}x{}",
                c.camera_id,
                c.width,
                c.height,
                img.width(),
                img.height(),
                d.width,
                d.height
            )));
        }
    }
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let cloud = if people.is_empty() {
        PointCloud::new(Vec::new())
    } else {
        let clouds = cams
            .iter()
            .zip(depths)
            .map(|(c, d)| depth_to_cloud(c, d, cfg.cloud_stride, None))
            .collect::<Result<Vec<_>, _>>()?;
        merge(&clouds)
    };
    timings.cloud = t.elapsed();

    let t = Instant::now();
    let mut heads = Vec::new();
    let mut persons = Vec::new();
    for s in people {
        let fit = FitConfig {
            seed: fit_seed(cfg.seed, frame, s.person_id),
            ..cfg.fit
        };
        let (head, status) = fit_person(s, &cloud, model, &fit, frame);
        persons.push(PersonResult {
            person_id: s.person_id,
            confidence: s.frame_confidence,
            fit: status,
            pose: head.as_ref().map(|h| h.pose.to_rows()),
            verdicts: Vec::new(),
        });
        heads.extend(head);
    }
    timings.fit = t.elapsed();

    let t = Instant::now();
    let verdicts: Vec<Vec<VisibilityVerdict>> = heads
        .iter()
        .map(|h| {
            cams.iter()
                .zip(depths)
                .map(|(c, d)| check_visibility(h, c, d, cfg.visibility_threshold))
                .collect()
        })
        .collect();
    for (h, v) in heads.iter().zip(&verdicts) {
        let pr = persons
            .iter_mut()
            .find(|p| p.person_id == h.person_id)
            .expect("person listed");
        pr.verdicts = v.clone();
    }
    timings.visibility = t.elapsed();

    let t = Instant::now();
    let mut out = anonymize_frame(images, cams, &heads, &verdicts, textures, &BTreeMap::new())?;
    if let Some(m) = cfg.naive {
        out.images = images.to_vec();
        for b in &out.boxes {
            let i = cams
                .iter()
                .position(|c| c.camera_id == b.camera_id)
                .expect("box camera");
            out.images[i] = naive_anonymize(&out.images[i], b, m)?;
        }
    }
    for b in &out.boxes {
        let seen = verdicts
            .iter()
            .flatten()
            .any(|v| v.camera_id == b.camera_id && v.visible);
        if !seen {
            return Err(PipelineError::Internal(format!(
                "frame {frame}: box in {} without a visible verdict",
                b.camera_id
            )));
        }
    }
    timings.render = t.elapsed();

    Ok(FrameOutput {
        images: out.images,
        boxes: out.boxes,
        persons,
        renders: out.renders,
        timings,
    })
}

fn process_frame(
    cfg: &PipelineConfig,
    ds: &Dataset,
    frame: u64,
) -> Result<FrameResult, PipelineError> {
    let p = &cfg.paths;
    let t = Instant::now();
    let mut images = Vec::with_capacity(ds.cams.len());
    let mut depths = Vec::with_capacity(ds.cams.len());
    for c in &ds.cams {
        images.push(load_image(&frame_path(
            &p.frames,
            &c.camera_id,
            frame,
            false,
        ))?);
        depths.push(DepthMap::load_png(&frame_path(
            &p.frames,
            &c.camera_id,
            frame,
            true,
        ))?);
    }
    let load = t.elapsed();

    let input = FrameInput {
        frame,
        cams: &ds.cams,
        images: &images,
        depths: &depths,
        people: ds.skeletons.get(&frame).map(Vec::as_slice).unwrap_or(&[]),
    };
    let out = process_views(cfg, &ds.model, &ds.textures, &input)?;

    let t = Instant::now();
    let mut cameras = Vec::with_capacity(ds.cams.len());
    for ((c, img), orig) in ds.cams.iter().zip(&out.images).zip(&images) {
        let dst = frame_path(&p.output, &c.camera_id, frame, false);
        let dir = dst.parent().expect("frame path has a folder");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        if img == orig {
            // Untouched images keep their exact bytes.
            let src = frame_path(&p.frames, &c.camera_id, frame, false);
            fs::copy(&src, &dst).map_err(io_err(&src))?;
        } else {
            img.save(&dst).map_err(img_err(&dst))?;
        }
        cameras.push(CameraOutput {
            camera_id: c.camera_id.clone(),
            image: dst
                .strip_prefix(&p.output)
                .expect("under output")
                .to_path_buf(),
        });
    }
    let mut result = FrameResult {
        frame,
        cameras,
        boxes: out.boxes,
        persons: out.persons,
        renders: out.renders,
        timings: StageTimings {
            load,
            ..out.timings
        },
    };
    let rdir = p.output.join("results");
    fs::create_dir_all(&rdir).map_err(io_err(&rdir))?;
    let rp = rdir.join(format!("frame_{frame:06}.json"));
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| PipelineError::Internal(e.to_string()))?;
    fs::write(&rp, json).map_err(io_err(&rp))?;
    result.timings.write = t.elapsed();
    let tm = &result.timings;
    info!(
        "frame {frame}: {} persons, {} boxes in {:.2?} (load {:.2?}, cloud {:.2?}, fit {:.2?}, visibility {:.2?}, render {:.2?}, write {:.2?})",
        result.persons.len(),
        result.boxes.len(),
        tm.total(),
        tm.load,
        tm.cloud,
        tm.fit,
        tm.visibility,
        tm.render,
        tm.write
    );
    Ok(result)
}

/// Runs the pipeline over every frame of the dataset and writes anonymized
/// images, per-frame JSON results and `boxes.json` to the output directory.
pub fn run_anonymize(cfg: &PipelineConfig) -> Result<Vec<FrameResult>, PipelineError> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    fs::create_dir_all(&cfg.paths.output).map_err(io_err(&cfg.paths.output))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| PipelineError::Internal(e.to_string()))?;
    let results: Vec<Result<FrameResult, PipelineError>> = pool.install(|| {
        ds.frames
            .par_iter()
            .map(|&f| process_frame(cfg, &ds, f))
            .collect()
    });
    let results: Vec<FrameResult> = results.into_iter().collect::<Result<_, _>>()?;

    let mut boxes = BoxSet::default();
    for r in &results {
        for c in &ds.cams {
            boxes.touch(r.frame, &c.camera_id);
        }
        for b in &r.boxes {
            boxes.push(r.frame, b.clone());
        }
    }
    boxes.save(&cfg.paths.output.join("boxes.json"), true)?;
    Ok(results)
}

/// Scores predicted boxes against ground truth. Returns the report and the
/// per-camera table.
pub fn run_evaluate(
    preds: &Path,
    gts: &Path,
    iou: f64,
) -> Result<(EvalReport, String), PipelineError> {
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(PipelineError::Config(format!(
            "IOU threshold must be in (0, 1], got {iou}"
        )));
    }
    let preds = BoxSet::load(preds)?;
    let gts = BoxSet::load(gts)?;
    let report = match_and_score(&preds, &gts, iou)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    let table = render_table(&[("ours", &report)]);
    Ok((report, table))
}

/// Externally computed metrics merged into a quality report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalMetrics {
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
}

fn frame_files(dir: &Path, cam: &str) -> Result<BTreeSet<u64>, PipelineError> {
    let d = dir.join(cam);
    if !d.is_dir() {
        return Err(PipelineError::Input(format!(
            "{} does not exist",
            d.display()
        )));
    }
    let mut out = BTreeSet::new();
    for e in fs::read_dir(&d).map_err(io_err(&d))? {
        let name = e.map_err(io_err(&d))?.file_name();
        let Some(n) = name
            .to_str()
            .and_then(|n| n.strip_prefix("frame_"))
            .and_then(|n| n.strip_suffix(".png"))
            .filter(|n| !n.ends_with(".depth"))
            .and_then(|n| n.parse().ok())
        else {
            continue;
        };
        out.insert(n);
    }
    Ok(out)
}

/// Mean SSIM between original and anonymized face crops, cropped with the
/// same boxes in both image sets.
pub fn run_quality(
    original: &Path,
    anonymized: &Path,
    boxes: &Path,
    external: Option<&Path>,
) -> Result<QualityReport, PipelineError> {
    let set = BoxSet::load(boxes)?;
    let mut orig_crops = Vec::new();
    let mut anon_crops = Vec::new();
    let mut checked = BTreeSet::new();
    for (&frame, cams) in &set.frames {
        let (mut oi, mut ai) = (BTreeMap::new(), BTreeMap::new());
        let mut listed = Vec::new();
        for (cam, list) in cams {
            if checked.insert(cam.clone()) {
                let (o, a) = (frame_files(original, cam)?, frame_files(anonymized, cam)?);
                if o != a {
                    let odd: Vec<u64> = o.symmetric_difference(&a).copied().collect();
                    return Err(PipelineError::Input(format!(
                        "camera {cam}: frames {odd:?} exist in only one image set"
                    )));
                }
            }
            if list.is_empty() {
                continue;
            }
            let (op, ap) = (
                frame_path(original, cam, frame, false),
                frame_path(anonymized, cam, frame, false),
            );
            let (o, a) = (load_image(&op)?, load_image(&ap)?);
            if o.dimensions() != a.dimensions() {
                return Err(PipelineError::Input(format!(
                    "{} and {} differ in size",
                    op.display(),
                    ap.display()
                )));
            }
            oi.insert(cam.clone(), o);
            ai.insert(cam.clone(), a);
            listed.extend(list.iter().cloned());
        }
        orig_crops.extend(crop_faces_for_quality(&oi, &listed));
        anon_crops.extend(crop_faces_for_quality(&ai, &listed));
    }
    let mut report = quality_report(&orig_crops, &anon_crops)?;
    if set.is_empty() {
        report
            .warnings
            .push(format!("{} holds no boxes", boxes.display()));
    }
    if let Some(path) = external {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let ext: ExternalMetrics =
            serde_json::from_str(&text).map_err(|source| MetricsError::Json {
                path: path.display().to_string(),
                source,
            })?;
        report.fid = ext.fid.or(report.fid);
        report.lpips = ext.lpips.or(report.lpips);
    }
    Ok(report)
}
