//! Scores predicted face boxes against ground truth: greedy IOU matching,
//! average precision and recall per camera.
//!
//! cargo run --example evaluate_boxes

use mvanon::metrics::{match_and_score, render_table, BoxSet, FaceBox, DEFAULT_IOU};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut gt = BoxSet::default();
    let mut pred = BoxSet::default();
    for (x, y) in [(100.0, 80.0), (300.0, 90.0)] {
        gt.push(0, FaceBox::new("cn01", x, y, 40.0, 50.0, 1.0));
    }
    gt.push(0, FaceBox::new("cn02", 200.0, 200.0, 30.0, 40.0, 1.0));

    pred.push(0, FaceBox::new("cn01", 104.0, 84.0, 40.0, 50.0, 0.9));
    pred.push(0, FaceBox::new("cn01", 500.0, 300.0, 40.0, 50.0, 0.8));
    pred.push(0, FaceBox::new("cn01", 290.0, 95.0, 40.0, 50.0, 0.7));
    pred.touch(0, "cn02");

    let report = match_and_score(&pred, &gt, DEFAULT_IOU)?;
    print!("{}", render_table(&[("example", &report)]));
    for w in &report.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
