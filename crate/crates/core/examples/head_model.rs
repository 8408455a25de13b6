//! Writes the built-in template head as `head.obj` + `head.json` and prints a
//! summary of its face region and probe vertices.
//!
//! cargo run --example head_model -- <out_dir>

use std::path::PathBuf;

use mvanon::headfit::HeadModel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&out)?;
    let model = HeadModel::template();
    model.save(&out.join("head.obj"), &out.join("head.json"))?;
    println!(
        "{} vertices, {} triangles, {} face vertices, face area {:.0} mm²",
        model.mesh.vertices.len(),
        model.mesh.triangles.len(),
        model.face_vertex_ids.len(),
        model.face_mesh().total_area()
    );
    for (k, p) in model.probe_points().iter().enumerate() {
        println!(
            "probe {k:2}: vertex {:4} at ({:7.1}, {:7.1}, {:7.1})",
            model.probe_vertex_ids[k], p.x, p.y, p.z
        );
    }
    Ok(())
}
