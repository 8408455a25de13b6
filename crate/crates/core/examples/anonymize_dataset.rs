//! End to end: writes a synthetic dataset, anonymizes it and scores the
//! predicted face boxes against the ground truth.
//!
//! cargo run --example anonymize_dataset -- <work_dir>

use std::path::PathBuf;

use mvanon::headfit::HeadModel;
use mvanon::pipeline::{run_anonymize, run_evaluate, FitStatus, Paths, PipelineConfig};
use mvanon::synth::{write_dataset, DatasetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "anonymize_out".into()),
    );
    let spec = DatasetSpec {
        seed: 5,
        skeleton_sigma: 20.0,
        ..Default::default()
    };
    write_dataset(&dir, &spec, &HeadModel::template())?;

    let cfg = PipelineConfig::new(Paths::in_dataset(&dir, &dir.join("anonymized")));
    let results = run_anonymize(&cfg)?;
    for r in &results {
        for p in &r.persons {
            let fit = match &p.fit {
                FitStatus::Registered { final_mse, .. } => {
                    format!("registered, MSE {final_mse:.1} mm²")
                }
                FitStatus::Fallback { reason } => format!("keypoint pose ({reason})"),
                FitStatus::Failed { reason } => format!("failed ({reason})"),
            };
            let seen = p.verdicts.iter().filter(|v| v.visible).count();
            println!(
                "frame {} person {}: {fit}; visible in {seen} cameras",
                r.frame, p.person_id
            );
        }
    }

    let (_, table) = run_evaluate(
        &cfg.paths.output.join("boxes.json"),
        &dir.join("ground_truth.json"),
        0.4,
    )?;
    print!("{table}");
    Ok(())
}
