//! Writes a small synthetic four-camera dataset: images, depth maps,
//! calibration, skeletons, ground-truth boxes, textures and the head model.
//!
//! cargo run --example synth_dataset -- <out_dir>

use std::path::PathBuf;

use mvanon::headfit::HeadModel;
use mvanon::synth::{write_dataset, DatasetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "synth_out".into()),
    );
    let spec = DatasetSpec {
        seed: 42,
        ..Default::default()
    };
    let summary = write_dataset(&out, &spec, &HeadModel::template())?;
    println!(
        "{} frames, {} persons, {} ground-truth boxes in {}",
        summary.frames,
        summary.persons,
        summary.truth_boxes,
        out.display()
    );
    Ok(())
}
