//! Compares face-crop SSIM for a Poisson-blended replacement and the naive
//! anonymizers on a synthetic scene.
//!
//! cargo run --example image_quality

use std::collections::BTreeMap;

use mvanon::headfit::{FittedHead, HeadModel};
use mvanon::metrics::{crop_faces_for_quality, quality_report};
use mvanon::render::{
    naive_anonymize, poisson_blend, rasterize_face_occluded, FaceTexture, NaiveMethod,
};
use mvanon::synth::{generate_scene, random_scene, RandomSceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = HeadModel::template();
    let truth = generate_scene(
        &random_scene(8, &RandomSceneSpec::default(), &model),
        &model,
    )?;
    let texture = FaceTexture::procedural(1, 256)?;
    let boxes: Vec<_> = truth
        .persons
        .iter()
        .flat_map(|p| p.views.iter().filter_map(|v| v.bbox.clone()))
        .collect();

    let original: BTreeMap<_, _> = truth
        .cameras
        .iter()
        .map(|c| (c.camera.camera_id.clone(), c.image.clone()))
        .collect();
    let mut blended = original.clone();
    for p in &truth.persons {
        let face = FittedHead::at_pose(&model, p.head_pose, p.person_id, 1.0);
        for (view, pv) in truth.cameras.iter().zip(&p.views) {
            if pv.bbox.is_none() {
                continue;
            }
            let img = blended
                .get_mut(&view.camera.camera_id)
                .expect("every camera is present");
            let r = rasterize_face_occluded(
                &face.face_mesh,
                Some(&face.occluder),
                &texture,
                &view.camera,
            )?;
            if let Ok(b) = poisson_blend(img, &r.color, &r.mask) {
                *img = b.image;
            }
        }
    }

    let orig_crops = crop_faces_for_quality(&original, &boxes);
    let report = |images: &BTreeMap<_, _>| {
        quality_report(&orig_crops, &crop_faces_for_quality(images, &boxes))
    };
    println!("{} face boxes", boxes.len());
    println!("poisson blend     SSIM {:?}", report(&blended)?.ssim_mean);
    for method in [
        NaiveMethod::Blackout,
        NaiveMethod::Pixelize(12),
        NaiveMethod::GaussianBlur(61),
    ] {
        let mut naive = original.clone();
        for b in &boxes {
            let img = naive
                .get_mut(&b.camera_id)
                .expect("every camera is present");
            *img = naive_anonymize(img, b, method)?;
        }
        println!(
            "{:<17} SSIM {:?}",
            method.to_string(),
            report(&naive)?.ssim_mean
        );
    }
    Ok(())
}
