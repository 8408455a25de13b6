//! Renders a textured face into one camera of a synthetic scene and blends it
//! in with Poisson image editing. Writes before/after PNGs.
//!
//! cargo run --example render_face -- <out_dir>

use std::path::PathBuf;

use mvanon::headfit::{FittedHead, HeadModel};
use mvanon::render::{poisson_blend, rasterize_face_occluded, FaceTexture};
use mvanon::synth::{generate_scene, random_scene, RandomSceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&out)?;
    let model = HeadModel::template();
    let truth = generate_scene(
        &random_scene(8, &RandomSceneSpec::default(), &model),
        &model,
    )?;
    let texture = FaceTexture::procedural(0, 256)?;

    // The view with the most visible face pixels.
    let (person, ci) = truth
        .persons
        .iter()
        .flat_map(|p| (0..p.views.len()).map(move |c| (p, c)))
        .max_by_key(|(p, c)| p.views[*c].visible_face_pixels)
        .ok_or("no persons in the scene")?;
    let view = &truth.cameras[ci];
    let face = FittedHead::at_pose(&model, person.head_pose, person.person_id, 1.0);
    let r = rasterize_face_occluded(
        &face.face_mesh,
        Some(&face.occluder),
        &texture,
        &view.camera,
    )?;
    let blend = poisson_blend(&view.image, &r.color, &r.mask)?;

    view.image.save(out.join("before.png"))?;
    blend.image.save(out.join("after.png"))?;
    println!(
        "person {} in {}: {} pixels covered, box ({}, {}, {}x{}), {} blended, residual {:.1e}",
        person.person_id,
        view.camera.camera_id,
        r.mask.count(),
        r.bbox.x,
        r.bbox.y,
        r.bbox.w,
        r.bbox.h,
        blend.region.len(),
        blend.residual.iter().fold(0.0f64, |a, &b| a.max(b))
    );
    Ok(())
}
