//! Registers the template head to a moved, noisy copy of itself with 20%
//! outliers: EM coarse alignment, then ICP.
//!
//! cargo run --example register_head

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mvanon::cloud::{sample_mesh_surface, PointCloud};
use mvanon::geometry::{Point3, RigidTransform};
use mvanon::headfit::HeadModel;
use mvanon::register::{register_coarse_to_fine, GmmEmConfig, IcpConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = HeadModel::template();
    let moving = sample_mesh_surface(&model.mesh, 1500, 1)?;

    let truth = RigidTransform::from_axis_angle(
        Vector3::new(1.0, 2.0, 0.5).normalize(),
        20f64.to_radians(),
        Vector3::new(120.0, -80.0, 60.0),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 5.0)?;
    let mut pts: Vec<Point3> = sample_mesh_surface(&model.mesh, 6000, 2)?
        .points
        .iter()
        .map(|p| truth.apply(p) + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
        .collect();
    let b = PointCloud::new(pts.clone()).bounds().ok_or("empty cloud")?;
    for _ in 0..1500 {
        pts.push(Point3::new(
            rng.random_range(b.min.x..b.max.x),
            rng.random_range(b.min.y..b.max.y),
            rng.random_range(b.min.z..b.max.z),
        ));
    }
    let fixed = PointCloud::new(pts);

    let t = Instant::now();
    let r = register_coarse_to_fine(
        &moving,
        &fixed,
        &GmmEmConfig::default(),
        &IcpConfig::default(),
    )?;
    println!(
        "{} EM + ICP iterations in {:.0?}: rotation error {:.2} deg, translation error {:.2} mm, ICP MSE {:.1} mm²",
        r.iterations_used,
        t.elapsed(),
        r.transform.rotation_error_deg(&truth),
        r.transform.translation_error(&truth),
        r.final_mse
    );
    Ok(())
}
