//! Per-camera face visibility from depth maps.
//!
//! Each probe vertex of a fitted face is projected into the camera and compared
//! with the point the depth map reports at that pixel. A face is visible as soon
//! as one probe is. Pixels without a depth measurement cannot refute a probe, so
//! they count as visible: faces outside the depth sensor's field of view are
//! still rendered.

use serde::{Deserialize, Serialize};

use crate::cloud::DepthMap;
use crate::geometry::{CameraParams, Pixel, Point3};
use crate::headfit::FittedHead;

pub const DEFAULT_THRESHOLD_MM: f64 = 150.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityVerdict {
    pub camera_id: String,
    pub visible: bool,
    pub probes_total: usize,
    pub probes_visible: usize,
    /// Probes whose pixel holds no depth. They are included in `probes_visible`.
    pub probes_outside_depth_fov: usize,
}

/// Outcome for a single probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeState {
    /// Behind the camera or off the image.
    OutOfView,
    /// In the image but the depth pixel is empty.
    NoDepth,
    Visible,
    Occluded,
}

pub fn probe_state(
    probe: &Point3,
    cam: &CameraParams,
    depth: &DepthMap,
    threshold: f64,
) -> ProbeState {
    let Some(px) = cam.project(probe) else {
        return ProbeState::OutOfView;
    };
    let Some((x, y)) = px.index(cam.width, cam.height) else {
        return ProbeState::OutOfView;
    };
    let d = depth.get(x, y);
    if d <= 0.0 {
        return ProbeState::NoDepth;
    }
    let seen = cam
        .unproject(&Pixel::new(x as f64, y as f64, d))
        .expect("positive depth");
    if (seen - probe).norm() < threshold {
        ProbeState::Visible
    } else {
        ProbeState::Occluded
    }
}

/// `depth` must match the camera resolution; `threshold` is in mm.
pub fn check_visibility(
    face: &FittedHead,
    cam: &CameraParams,
    depth: &DepthMap,
    threshold: f64,
) -> VisibilityVerdict {
    assert!(
        threshold > 0.0,
        "threshold must be positive, got {threshold}"
    );
    assert!(
        depth.width == cam.width && depth.height == cam.height,
        "depth map {}x{} does not match camera {} ({}x{})",
        depth.width,
        depth.height,
        cam.camera_id,
        cam.width,
        cam.height
    );
    let mut visible = 0;
    let mut no_depth = 0;
    for p in &face.probes {
        match probe_state(p, cam, depth, threshold) {
            ProbeState::Visible => visible += 1,
            ProbeState::NoDepth => {
                visible += 1;
                no_depth += 1;
            }
            ProbeState::OutOfView | ProbeState::Occluded => {}
        }
    }
    VisibilityVerdict {
        camera_id: cam.camera_id.clone(),
        visible: visible >= 1,
        probes_total: face.probes.len(),
        probes_visible: visible,
        probes_outside_depth_fov: no_depth,
    }
}
