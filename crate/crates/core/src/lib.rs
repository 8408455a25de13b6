//! Face anonymization for calibrated multi-view RGB-D recordings.
//!
//! Depth maps from all cameras are merged into one point cloud. For every
//! person, a template head is placed at the pose implied by the 3D keypoints
//! and refined by rigid registration against the cloud. The depth maps then
//! decide in which cameras the face shows. There, a textured replacement face
//! is rendered and blended into the image in the gradient domain.
//!
// `!(x > 0.0)` is deliberate: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod geometry;
pub mod headfit;
pub mod kdtree;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod register;
pub mod render;
pub mod synth;
pub mod visibility;
