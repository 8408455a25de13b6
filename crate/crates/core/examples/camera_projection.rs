//! Projects points through a ceiling camera, unprojects them again and turns
//! a rendered depth map into a world-frame point cloud.
//!
//! cargo run --example camera_projection

use mvanon::cloud::depth_to_cloud;
use mvanon::geometry::{Pixel, Point3};
use mvanon::headfit::HeadModel;
use mvanon::synth::{generate_scene, random_scene, RandomSceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = HeadModel::template();
    let truth = generate_scene(
        &random_scene(3, &RandomSceneSpec::default(), &model),
        &model,
    )?;
    let view = &truth.cameras[0];
    let cam = &view.camera;

    for p in [
        Point3::new(2250.0, 2750.0, 900.0),
        Point3::new(1500.0, 2000.0, 1700.0),
    ] {
        let px = cam.project(&p).ok_or("point behind the camera")?;
        let back = cam.unproject(&Pixel::new(px.u, px.v, px.d))?;
        println!(
            "{}: ({:.0}, {:.0}, {:.0}) -> pixel ({:.2}, {:.2}) depth {:.1} -> error {:.1e} mm",
            cam.camera_id,
            p.x,
            p.y,
            p.z,
            px.u,
            px.v,
            px.d,
            (back - p).norm()
        );
    }

    let cloud = depth_to_cloud(cam, &view.depth, 4, None)?;
    let b = cloud.bounds().ok_or("empty depth map")?;
    println!(
        "{} points from every 4th pixel, bounds ({:.0}, {:.0}, {:.0}) to ({:.0}, {:.0}, {:.0})",
        cloud.len(),
        b.min.x,
        b.min.y,
        b.min.z,
        b.max.x,
        b.max.y,
        b.max.z
    );
    Ok(())
}
