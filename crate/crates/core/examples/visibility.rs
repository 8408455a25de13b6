//! Decides per camera whether each face is visible from the depth maps and
//! compares the verdict with the ray-cast truth of a synthetic scene.
//!
//! cargo run --example visibility

use mvanon::headfit::{FittedHead, HeadModel};
use mvanon::synth::{generate_scene, random_scene, RandomSceneSpec};
use mvanon::visibility::{check_visibility, DEFAULT_THRESHOLD_MM};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = HeadModel::template();
    let spec = RandomSceneSpec {
        occluders: 3,
        ..Default::default()
    };
    let truth = generate_scene(&random_scene(21, &spec, &model), &model)?;
    for person in &truth.persons {
        let face = FittedHead::at_pose(&model, person.head_pose, person.person_id, 1.0);
        for (view, truth_view) in truth.cameras.iter().zip(&person.views) {
            let v = check_visibility(&face, &view.camera, &view.depth, DEFAULT_THRESHOLD_MM);
            println!(
                "person {} {}: {} ({}/{} probes, {} without depth); truth {}{}",
                person.person_id,
                v.camera_id,
                if v.visible { "visible" } else { "hidden" },
                v.probes_visible,
                v.probes_total,
                v.probes_outside_depth_fov,
                if truth_view.visible {
                    "visible"
                } else {
                    "hidden"
                },
                if truth_view.clean() {
                    ""
                } else {
                    " (not a clean case: near an edge or outside the depth FOV)"
                }
            );
        }
    }
    Ok(())
}
