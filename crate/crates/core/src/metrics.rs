//! Face-localization scoring (IOU matching, AP, recall) and SSIM.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_IOU: f64 = 0.4;
pub const SSIM_WINDOW: u32 = 8;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("key mismatch: {0}")]
    KeyMismatch(String),
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("images of {0}x{1} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(u32, u32),
    #[error("invalid box: {0}")]
    InvalidBox(String),
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

/// Axis-aligned box covering pixels `[x, x + w) × [y, y + h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub camera_id: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl FaceBox {
    pub fn new(
        camera_id: impl Into<String>,
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        confidence: f64,
    ) -> Self {
        Self {
            camera_id: camera_id.into(),
            x,
            y,
            w,
            h,
            confidence,
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let finite = [self.x, self.y, self.w, self.h, self.confidence]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(MetricsError::InvalidBox(format!(
                "{}: ({}, {}, {}, {}) needs finite coordinates and positive size",
                self.camera_id, self.x, self.y, self.w, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(MetricsError::InvalidBox(format!(
                "{}: confidence {} outside [0, 1]",
                self.camera_id, self.confidence
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Integer pixel rectangle `(x0, y0, x1, y1)`, exclusive upper bounds,
    /// clamped to a `width × height` image. `None` when the box misses it.
    pub fn pixel_rect(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let x0 = self.x.floor().max(0.0);
        let y0 = self.y.floor().max(0.0);
        let x1 = (self.x + self.w).ceil().min(width as f64);
        let y1 = (self.y + self.h).ceil().min(height as f64);
        (x0 < x1 && y0 < y1).then_some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
    }
}

pub fn iou(a: &FaceBox, b: &FaceBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Boxes per frame per camera.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxSet {
    pub frames: BTreeMap<u64, BTreeMap<String, Vec<FaceBox>>>,
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conf: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame: u64,
    cameras: BTreeMap<String, Vec<BoxRecord>>,
}

#[derive(Serialize, Deserialize)]
struct BoxFile {
    frames: Vec<FrameRecord>,
}

impl BoxSet {
    pub fn push(&mut self, frame: u64, b: FaceBox) {
        self.frames
            .entry(frame)
            .or_default()
            .entry(b.camera_id.clone())
            .or_default()
            .push(b);
    }

    /// Registers a camera for a frame without adding boxes.
    pub fn touch(&mut self, frame: u64, camera_id: &str) {
        self.frames
            .entry(frame)
            .or_default()
            .entry(camera_id.to_string())
            .or_default();
    }

    pub fn len(&self) -> usize {
        self.frames
            .values()
            .flat_map(|c| c.values())
            .map(Vec::len)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn camera_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .frames
            .values()
            .flat_map(|c| c.keys().cloned())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Boxes without a `conf` field get confidence 1.
    pub fn from_json(text: &str, path: &str) -> Result<BoxSet, MetricsError> {
        let file: BoxFile = serde_json::from_str(text).map_err(|source| MetricsError::Json {
            path: path.to_string(),
            source,
        })?;
        let mut set = BoxSet::default();
        for fr in file.frames {
            if set.frames.contains_key(&fr.frame) {
                return Err(MetricsError::KeyMismatch(format!(
                    "{path}: frame {} listed twice",
                    fr.frame
                )));
            }
            let cams = set.frames.entry(fr.frame).or_default();
            for (cam, boxes) in fr.cameras {
                let list = cams.entry(cam.clone()).or_default();
                for r in boxes {
                    let b = FaceBox::new(cam.clone(), r.x, r.y, r.w, r.h, r.conf.unwrap_or(1.0));
                    b.validate().map_err(|e| {
                        MetricsError::InvalidBox(format!("{path}: frame {}: {e}", fr.frame))
                    })?;
                    list.push(b);
                }
            }
        }
        Ok(set)
    }

    pub fn to_json(&self, with_confidence: bool) -> String {
        let file = BoxFile {
            frames: self
                .frames
                .iter()
                .map(|(&frame, cams)| FrameRecord {
                    frame,
                    cameras: cams
                        .iter()
                        .map(|(id, boxes)| {
                            let recs = boxes
                                .iter()
                                .map(|b| BoxRecord {
                                    x: b.x,
                                    y: b.y,
                                    w: b.w,
                                    h: b.h,
                                    conf: with_confidence.then_some(b.confidence),
                                })
                                .collect();
                            (id.clone(), recs)
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("box set serializes")
    }

    pub fn load(path: &Path) -> Result<BoxSet, MetricsError> {
        let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        BoxSet::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path, with_confidence: bool) -> Result<(), MetricsError> {
        fs::write(path, self.to_json(with_confidence)).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraScore {
    pub camera_id: String,
    pub ap: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub cameras: Vec<CameraScore>,
    pub mean_ap: f64,
    pub mean_recall: f64,
    /// Cameras scored without any ground truth (their AP and recall are 0).
    pub warnings: Vec<String>,
}

/// Result of matching one camera's predictions, in descending-confidence order.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `(frame, prediction index, matched GT index)` per prediction.
    pub order: Vec<(u64, usize, Option<usize>)>,
    pub num_gt: usize,
}

/// Greedy matching of one camera: predictions in descending confidence (ties
/// by frame, then list position) each take the unmatched GT box of the same
/// frame with the highest IOU at or above `thresh`, ties to the lower index.
pub fn match_camera(
    preds: &BTreeMap<u64, &[FaceBox]>,
    gts: &BTreeMap<u64, &[FaceBox]>,
    thresh: f64,
) -> Matching {
    let mut order: Vec<(u64, usize)> = preds
        .iter()
        .flat_map(|(&f, boxes)| (0..boxes.len()).map(move |i| (f, i)))
        .collect();
    order.sort_by(|a, b| {
        let ca = preds[&a.0][a.1].confidence;
        let cb = preds[&b.0][b.1].confidence;
        cb.total_cmp(&ca).then(a.cmp(b))
    });
    let mut taken: BTreeMap<u64, Vec<bool>> = gts
        .iter()
        .map(|(&f, boxes)| (f, vec![false; boxes.len()]))
        .collect();
    let mut out = Vec::with_capacity(order.len());
    for (f, i) in order {
        let p = &preds[&f][i];
        let mut best: Option<(usize, f64)> = None;
        if let (Some(gt), Some(used)) = (gts.get(&f), taken.get_mut(&f)) {
            for (j, g) in gt.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let o = iou(p, g);
                if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
        }
        out.push((f, i, best.map(|(j, _)| j)));
    }
    Matching {
        order: out,
        num_gt: gts.values().map(|g| g.len()).sum(),
    }
}

/// All-point interpolated AP from a ranked hit list: the area under the curve
/// whose precision at each recall level is the best precision at any higher
/// recall.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Scores predictions against ground truth per camera. Every frame and camera
/// in `preds` must exist in `gts`; entries missing from `preds` count as empty.
pub fn match_and_score(
    preds: &BoxSet,
    gts: &BoxSet,
    iou_thresh: f64,
) -> Result<EvalReport, MetricsError> {
    assert!(
        iou_thresh > 0.0 && iou_thresh <= 1.0,
        "IOU threshold must be in (0, 1], got {iou_thresh}"
    );
    for (f, cams) in &preds.frames {
        let Some(gt_cams) = gts.frames.get(f) else {
            return Err(MetricsError::KeyMismatch(format!(
                "frame {f} has predictions but no ground-truth entry"
            )));
        };
        if let Some(c) = cams.keys().find(|c| !gt_cams.contains_key(*c)) {
            return Err(MetricsError::KeyMismatch(format!(
                "frame {f}: camera {c} has predictions but no ground-truth entry"
            )));
        }
    }
    let mut cameras = Vec::new();
    let mut warnings = Vec::new();
    for cam in gts.camera_ids() {
        let (p, g) = (camera_boxes(preds, &cam), camera_boxes(gts, &cam));
        let m = match_camera(&p, &g, iou_thresh);
        let hits: Vec<bool> = m.order.iter().map(|o| o.2.is_some()).collect();
        let tp = hits.iter().filter(|&&h| h).count();
        if m.num_gt == 0 {
            warnings.push(format!(
                "camera {cam}: no ground-truth faces; AP and recall reported as 0"
            ));
        }
        cameras.push(CameraScore {
            camera_id: cam.clone(),
            ap: average_precision(&hits, m.num_gt),
            recall: if m.num_gt == 0 {
                0.0
            } else {
                tp as f64 / m.num_gt as f64
            },
            tp,
            fp: hits.len() - tp,
            fn_: m.num_gt - tp,
        });
    }
    let n = cameras.len().max(1) as f64;
    Ok(EvalReport {
        iou_threshold: iou_thresh,
        mean_ap: cameras.iter().map(|c| c.ap).sum::<f64>() / n,
        mean_recall: cameras.iter().map(|c| c.recall).sum::<f64>() / n,
        cameras,
        warnings,
    })
}

fn camera_boxes<'a>(set: &'a BoxSet, cam: &str) -> BTreeMap<u64, &'a [FaceBox]> {
    set.frames
        .iter()
        .filter_map(|(&f, c)| c.get(cam).map(|b| (f, b.as_slice())))
        .collect()
}

/// Text table with one AP/RR column pair per method, cameras as rows and an
/// `Avg.` row. Cameras are the union over all reports.
pub fn render_table(methods: &[(&str, &EvalReport)]) -> String {
    let mut cams: Vec<&str> = methods
        .iter()
        .flat_map(|(_, r)| r.cameras.iter().map(|c| c.camera_id.as_str()))
        .collect();
    cams.sort_unstable();
    cams.dedup();
    const CELL: usize = 10;
    let pair = 2 * CELL + 1;
    let mut out = String::new();
    let _ = write!(out, "{:<6}", "");
    for (name, _) in methods {
        let _ = write!(out, "|{name:^pair$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<6}", "");
    for (_, r) in methods {
        let t = r.iou_threshold;
        let _ = write!(
            out,
            "|{:^CELL$} {:^CELL$}",
            format!("AP @ {t}"),
            format!("RR @ {t}")
        );
    }
    out.push('\n');
    let rule = 6 + methods.len() * (pair + 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    for cam in &cams {
        let _ = write!(out, "{cam:<6}");
        for (_, r) in methods {
            let s = r.cameras.iter().find(|c| c.camera_id == *cam);
            let _ = write!(
                out,
                "|{:^CELL$} {:^CELL$}",
                cell(s.map(|s| s.ap)),
                cell(s.map(|s| s.recall))
            );
        }
        out.push('\n');
    }
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    let _ = write!(out, "{:<6}", "Avg.");
    for (_, r) in methods {
        let _ = write!(
            out,
            "|{:^CELL$} {:^CELL$}",
            cell(Some(r.mean_ap)),
            cell(Some(r.mean_recall))
        );
    }
    out.push('\n');
    out
}

/// BT.601 luma.
pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Mean SSIM over every 8×8 window position (stride 1) of the luma images.
/// Window statistics use population (1/N) moments.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    let (w, h) = a.dimensions();
    if b.dimensions() != (w, h) {
        return Err(MetricsError::DimensionMismatch(w, h, b.width(), b.height()));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(w, h));
    }
    let (ya, yb) = (luma(a), luma(b));
    let (w, h) = (w as usize, h as usize);
    // Summed-area tables of x, y, x², y², xy with a zero row and column.
    let sw = w + 1;
    let mut sat = vec![[0.0f64; 5]; sw * (h + 1)];
    for y in 0..h {
        let mut row = [0.0f64; 5];
        for x in 0..w {
            let (p, q) = (ya[y * w + x], yb[y * w + x]);
            let v = [p, q, p * p, q * q, p * q];
            for k in 0..5 {
                row[k] += v[k];
                sat[(y + 1) * sw + x + 1][k] = sat[y * sw + x + 1][k] + row[k];
            }
        }
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let win = SSIM_WINDOW as usize;
    let mut total = 0.0;
    for y in 0..=h - win {
        for x in 0..=w - win {
            let mut s = [0.0f64; 5];
            for (k, sk) in s.iter_mut().enumerate() {
                *sk = sat[(y + win) * sw + x + win][k]
                    - sat[y * sw + x + win][k]
                    - sat[(y + win) * sw + x][k]
                    + sat[y * sw + x][k];
            }
            let (ma, mb) = (s[0] / n, s[1] / n);
            let va = (s[2] / n - ma * ma).max(0.0);
            let vb = (s[3] / n - mb * mb).max(0.0);
            let cov = s[4] / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / ((h - win + 1) * (w - win + 1)) as f64)
}

/// Crop of one box, clamped to its image.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCrop {
    pub camera_id: String,
    /// `(x0, y0, x1, y1)`, exclusive upper bounds.
    pub rect: (u32, u32, u32, u32),
    pub image: RgbImage,
}

/// One crop per box whose camera is present and which overlaps its image.
/// Cropping original and anonymized images with the same boxes yields pairs
/// of identical geometry.
pub fn crop_faces_for_quality(
    images: &BTreeMap<String, RgbImage>,
    boxes: &[FaceBox],
) -> Vec<FaceCrop> {
    boxes
        .iter()
        .filter_map(|b| {
            let img = images.get(&b.camera_id)?;
            let rect = b.pixel_rect(img.width(), img.height())?;
            let (x0, y0, x1, y1) = rect;
            let image = image::imageops::crop_imm(img, x0, y0, x1 - x0, y1 - y0).to_image();
            Some(FaceCrop {
                camera_id: b.camera_id.clone(),
                rect,
                image,
            })
        })
        .collect()
}

/// Image-quality summary. FID and LPIPS are not computed here; the slots take
/// externally produced values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub crops: usize,
    /// Crops smaller than the SSIM window, left out of the mean.
    pub skipped: usize,
    pub ssim_mean: Option<f64>,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
    pub warnings: Vec<String>,
}

/// Mean SSIM over paired crops.
pub fn quality_report(
    original: &[FaceCrop],
    anonymized: &[FaceCrop],
) -> Result<QualityReport, MetricsError> {
    if original.len() != anonymized.len() {
        return Err(MetricsError::KeyMismatch(format!(
            "{} original crops vs {} anonymized crops",
            original.len(),
            anonymized.len()
        )));
    }
    let mut report = QualityReport::default();
    let mut sum = 0.0;
    for (o, a) in original.iter().zip(anonymized) {
        if o.camera_id != a.camera_id || o.rect != a.rect {
            return Err(MetricsError::KeyMismatch(format!(
                "crop {}{:?} paired with {}{:?}",
                o.camera_id, o.rect, a.camera_id, a.rect
            )));
        }
        match ssim(&o.image, &a.image) {
            Ok(s) => {
                sum += s;
                report.crops += 1;
            }
            Err(MetricsError::TooSmall(..)) => report.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if report.crops == 0 {
        report
            .warnings
            .push("no face crops large enough to score".to_string());
    } else {
        report.ssim_mean = Some(sum / report.crops as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fb(x: f64, y: f64, w: f64, h: f64, c: f64) -> FaceBox {
        FaceBox::new("cn01", x, y, w, h, c)
    }

    #[test]
    fn iou_examples() {
        let a = fb(0.0, 0.0, 10.0, 10.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &fb(20.0, 20.0, 5.0, 5.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &fb(10.0, 0.0, 5.0, 5.0, 1.0)), 0.0);
        let b = fb(5.0, 0.0, 10.0, 10.0, 1.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-15);
    }

    fn single(preds: Vec<FaceBox>, gts: Vec<FaceBox>) -> (BoxSet, BoxSet) {
        let mut p = BoxSet::default();
        let mut g = BoxSet::default();
        g.touch(0, "cn01");
        for b in preds {
            p.push(0, b);
        }
        for b in gts {
            g.push(0, b);
        }
        (p, g)
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![
            fb(0.0, 0.0, 10.0, 10.0, 1.0),
            fb(50.0, 50.0, 20.0, 30.0, 1.0),
        ];
        let (p, g) = single(gts.clone(), gts);
        let r = match_and_score(&p, &g, 0.4).unwrap();
        assert_eq!((r.cameras[0].ap, r.cameras[0].recall), (1.0, 1.0));
        assert_eq!((r.mean_ap, r.mean_recall), (1.0, 1.0));
    }

    #[test]
    fn no_predictions_score_zero() {
        let (p, g) = single(vec![], vec![fb(0.0, 0.0, 10.0, 10.0, 1.0)]);
        let r = match_and_score(&p, &g, 0.4).unwrap();
        assert_eq!(r.cameras[0].ap, 0.0);
        assert_eq!(r.cameras[0].recall, 0.0);
        assert_eq!(r.cameras[0].fn_, 1);
    }

    #[test]
    fn worked_ap_example() {
        let g1 = fb(0.0, 0.0, 10.0, 10.0, 1.0);
        let g2 = fb(100.0, 0.0, 10.0, 10.0, 1.0);
        let preds = vec![
            fb(0.0, 0.0, 10.0, 10.0, 0.9),
            fb(300.0, 0.0, 10.0, 10.0, 0.8),
            fb(100.0, 0.0, 10.0, 10.0, 0.7),
        ];
        let (p, g) = single(preds, vec![g1, g2]);
        let r = match_and_score(&p, &g, 0.4).unwrap();
        let c = &r.cameras[0];
        // Precision after each prediction: 1, 1/2, 2/3; recall 1/2, 1/2, 1.
        assert_eq!(c.ap, 1.0 * 0.5 + (2.0 / 3.0) * 0.5);
        assert!((c.ap - 0.833_333_333_333_333_3).abs() < 1e-15);
        assert_eq!((c.recall, c.tp, c.fp, c.fn_), (1.0, 2, 1, 0));
    }

    #[test]
    fn empty_ground_truth_warns() {
        let (p, mut g) = single(vec![fb(0.0, 0.0, 10.0, 10.0, 0.5)], vec![]);
        g.touch(0, "cn01");
        let r = match_and_score(&p, &g, 0.4).unwrap();
        assert_eq!(r.cameras[0].ap, 0.0);
        assert_eq!(r.cameras[0].fp, 1);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn unknown_prediction_keys_rejected() {
        let (mut p, g) = single(vec![], vec![fb(0.0, 0.0, 10.0, 10.0, 1.0)]);
        p.push(7, fb(0.0, 0.0, 1.0, 1.0, 1.0));
        assert!(matches!(
            match_and_score(&p, &g, 0.4),
            Err(MetricsError::KeyMismatch(_))
        ));
        let (mut p, g) = single(vec![], vec![fb(0.0, 0.0, 10.0, 10.0, 1.0)]);
        p.push(0, FaceBox::new("cn09", 0.0, 0.0, 1.0, 1.0, 1.0));
        assert!(match_and_score(&p, &g, 0.4).is_err());
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let text =
            r#"{"frames":[{"frame":3,"cameras":{"cn01":[{"x":1,"y":2,"w":3,"h":4}],"cn02":[]}}]}"#;
        let set = BoxSet::from_json(text, "mem").unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.frames[&3]["cn01"][0].confidence, 1.0);
        assert!(set.frames[&3]["cn02"].is_empty());
        let back = BoxSet::from_json(&set.to_json(true), "mem").unwrap();
        assert_eq!(back, set);
        let bad = r#"{"frames":[{"frame":0,"cameras":{"cn01":[{"x":0,"y":0,"w":0,"h":4}]}}]}"#;
        assert!(BoxSet::from_json(bad, "mem").is_err());
    }

    #[test]
    fn table_has_camera_rows_and_average() {
        let gts = vec![fb(0.0, 0.0, 10.0, 10.0, 1.0)];
        let (p, g) = single(gts.clone(), gts);
        let r = match_and_score(&p, &g, 0.4).unwrap();
        let t = render_table(&[("Ours", &r)]);
        assert!(t.contains("AP @ 0.4"));
        assert!(t.contains("RR @ 0.4"));
        assert!(t
            .lines()
            .any(|l| l.starts_with("cn01") && l.contains("1.00")));
        assert!(t.lines().any(|l| l.starts_with("Avg.")));
    }

    /// Direct per-window SSIM, written independently of the summed-area version.
    fn ssim_direct(a: &RgbImage, b: &RgbImage) -> f64 {
        let gray = |img: &RgbImage, x: u32, y: u32| {
            let p = img.get_pixel(x, y);
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        };
        let (w, h) = a.dimensions();
        let mut sum = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - 8 {
            for x0 in 0..=w - 8 {
                let mut xs = Vec::with_capacity(64);
                let mut ys = Vec::with_capacity(64);
                for y in y0..y0 + 8 {
                    for x in x0..x0 + 8 {
                        xs.push(gray(a, x, y));
                        ys.push(gray(b, x, y));
                    }
                }
                let mx = xs.iter().sum::<f64>() / 64.0;
                let my = ys.iter().sum::<f64>() / 64.0;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / 64.0;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / 64.0;
                let cxy = xs
                    .iter()
                    .zip(&ys)
                    .map(|(p, q)| (p - mx) * (q - my))
                    .sum::<f64>()
                    / 64.0;
                let c1 = 6.5025;
                let c2 = 58.5225;
                sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        sum / count
    }

    fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |_, _| {
            image::Rgb([rng.random(), rng.random(), rng.random()])
        })
    }

    #[test]
    fn ssim_matches_direct_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = random_image(&mut rng, 64, 64);
            let mut b = a.clone();
            for p in b.pixels_mut() {
                p[0] = p[0].saturating_add(rng.random_range(0..40));
            }
            let c = random_image(&mut rng, 64, 64);
            for (x, y) in [(&a, &b), (&a, &c)] {
                assert!((ssim(x, y).unwrap() - ssim_direct(x, y)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ssim_zero_variance_closed_form() {
        let black = RgbImage::new(16, 16);
        let white = RgbImage::from_pixel(16, 16, image::Rgb([255, 255, 255]));
        // Zero variances: SSIM = (2·0·255 + C1)·C2 / ((0 + 255² + C1)·C2).
        let want = 6.5025 / (255.0f64 * 255.0 + 6.5025);
        assert!((ssim(&black, &white).unwrap() - want).abs() < 1e-12);
        assert!((ssim(&white, &white).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_bad_sizes() {
        let a = RgbImage::new(16, 16);
        assert!(matches!(
            ssim(&a, &RgbImage::new(16, 15)),
            Err(MetricsError::DimensionMismatch(..))
        ));
        assert!(matches!(
            ssim(&RgbImage::new(7, 16), &RgbImage::new(7, 16)),
            Err(MetricsError::TooSmall(..))
        ));
    }

    #[test]
    fn crops_are_clamped() {
        let mut images = BTreeMap::new();
        images.insert("cn01".to_string(), RgbImage::new(40, 30));
        assert!(crop_faces_for_quality(&images, &[]).is_empty());
        let full = crop_faces_for_quality(&images, &[fb(0.0, 0.0, 40.0, 30.0, 1.0)]);
        assert_eq!(full[0].image, images["cn01"]);
        let part = crop_faces_for_quality(&images, &[fb(30.0, -5.0, 20.0, 15.0, 1.0)]);
        // Intersection of [30, 50) × [-5, 10) with [0, 40) × [0, 30).
        assert_eq!(part[0].rect, (30, 0, 40, 10));
        assert_eq!(part[0].image.dimensions(), (10, 10));
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_scale_invariant(
            a in (0.0f64..100.0, 0.0f64..100.0, 1.0f64..50.0, 1.0f64..50.0),
            b in (0.0f64..100.0, 0.0f64..100.0, 1.0f64..50.0, 1.0f64..50.0),
            s in 0.1f64..10.0,
        ) {
            let a = fb(a.0, a.1, a.2, a.3, 1.0);
            let b = fb(b.0, b.1, b.2, b.3, 1.0);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            let sc = |x: &FaceBox| fb(x.x * s, x.y * s, x.w * s, x.h * s, 1.0);
            prop_assert!((iou(&sc(&a), &sc(&b)) - v).abs() < 1e-12);
        }

        #[test]
        fn scores_invariant_under_monotone_confidence(
            boxes in prop::collection::vec((0u8..6, 0u8..6, 0.0f64..1.0), 0..8),
            gts in prop::collection::vec((0u8..6, 0u8..6), 0..6),
        ) {
            let preds: Vec<FaceBox> = boxes.iter().map(|&(x, y, c)| fb(x as f64 * 5.0, y as f64 * 5.0, 8.0, 8.0, c)).collect();
            let gts: Vec<FaceBox> = gts.iter().map(|&(x, y)| fb(x as f64 * 5.0, y as f64 * 5.0, 8.0, 8.0, 1.0)).collect();
            let squashed: Vec<FaceBox> = preds.iter().map(|b| FaceBox { confidence: b.confidence.powi(3) * 0.5, ..b.clone() }).collect();
            let (p1, g) = single(preds, gts.clone());
            let (p2, _) = single(squashed, gts);
            let r1 = match_and_score(&p1, &g, 0.4).unwrap();
            let r2 = match_and_score(&p2, &g, 0.4).unwrap();
            prop_assert_eq!(r1.cameras, r2.cameras);
        }

        #[test]
        fn ssim_identity_and_symmetry(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 12, 10);
            let b = random_image(&mut rng, 12, 10);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
