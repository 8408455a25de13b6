use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use mvanon::cloud::PointCloud;
use mvanon::geometry::RigidTransform;
use mvanon::headfit::HeadModel;
use mvanon::metrics::DEFAULT_IOU;
use mvanon::pipeline::{
    run_anonymize, run_evaluate, run_quality, Paths, PipelineConfig, PipelineError,
};
use mvanon::register::{register_coarse_to_fine, GmmEmConfig, IcpConfig};
use mvanon::render::NaiveMethod;
use mvanon::synth::{write_dataset, DatasetSpec, RandomSceneSpec};

#[derive(Parser)]
#[command(version, about = "Multi-view RGB-D face anonymization")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Anonymize every frame of a dataset.
    Anonymize {
        /// Pipeline TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides paths.output.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides the face replacement: blackout, pixelize:K or blur:K.
        #[arg(long)]
        naive: Option<NaiveMethod>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score predicted face boxes against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU)]
        iou: f64,
        /// Writes the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean SSIM of face crops between original and anonymized images.
    Quality {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        anonymized: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        /// JSON with externally computed `fid` and `lpips`.
        #[arg(long)]
        external: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset with ground truth and a pipeline config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        persons: usize,
        #[arg(long, default_value_t = 1)]
        occluders: usize,
        /// Depth noise (mm).
        #[arg(long, default_value_t = 2.0)]
        noise: f64,
        /// Skeleton keypoint noise (mm).
        #[arg(long, default_value_t = 0.0)]
        skeleton_noise: f64,
        #[arg(long, default_value_t = 3)]
        textures: usize,
    },
    /// Rigidly register two `x y z` point files (coarse EM, then ICP).
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        /// TOML with `gmm` and `icp` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Writes the moving cloud after alignment.
        #[arg(long)]
        aligned: Option<PathBuf>,
    },
}

/// Registration settings for the `register` subcommand. Unlike the head fit,
/// nothing is known about the overlap, so the generic defaults apply.
#[derive(Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RegisterConfig {
    gmm: GmmEmConfig,
    icp: IcpConfig,
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Anonymize {
            config,
            output,
            naive,
            threshold,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(o) = output {
                cfg.paths.output = o;
            }
            cfg.naive = naive.or(cfg.naive);
            cfg.visibility_threshold = threshold.unwrap_or(cfg.visibility_threshold);
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cfg.jobs = cli.jobs.unwrap_or(cfg.jobs);
            let results = run_anonymize(&cfg)?;
            let boxes: usize = results.iter().map(|r| r.boxes.len()).sum();
            println!(
                "{} frames, {} face boxes -> {}",
                results.len(),
                boxes,
                cfg.paths.output.display()
            );
        }
        Command::Evaluate { pred, gt, iou, out } => {
            let (report, table) = run_evaluate(&pred, &gt, iou)?;
            print!("{table}");
            if let Some(out) = out {
                write_text(&out, &to_json(&report))?;
            }
        }
        Command::Quality {
            original,
            anonymized,
            boxes,
            external,
            out,
        } => {
            let report = run_quality(&original, &anonymized, &boxes, external.as_deref())?;
            println!("{}", to_json(&report));
            if let Some(out) = out {
                write_text(&out, &to_json(&report))?;
            }
        }
        Command::Synth {
            out,
            frames,
            persons,
            occluders,
            noise,
            skeleton_noise,
            textures,
        } => {
            let spec = DatasetSpec {
                seed: cli.seed.unwrap_or(0),
                frames,
                scene: RandomSceneSpec {
                    persons,
                    occluders,
                    noise_sigma: noise,
                    ..Default::default()
                },
                skeleton_sigma: skeleton_noise,
                textures,
            };
            let model = HeadModel::template();
            let summary = write_dataset(&out, &spec, &model)
                .map_err(|e| PipelineError::Input(e.to_string()))?;
            let mut cfg =
                PipelineConfig::new(Paths::in_dataset(Path::new("."), Path::new("anonymized")));
            cfg.paths.frames = PathBuf::from(".");
            cfg.seed = spec.seed;
            cfg.jobs = cli.jobs.unwrap_or(0);
            write_text(
                &out.join("pipeline.toml"),
                &cfg.to_toml().replace("\"./", "\""),
            )?;
            println!(
                "{} frames, {} persons, {} truth boxes -> {}",
                summary.frames,
                summary.persons,
                summary.truth_boxes,
                out.display()
            );
        }
        Command::Register {
            moving,
            fixed,
            config,
            aligned,
        } => {
            let fit = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|source| PipelineError::Io {
                        path: p.display().to_string(),
                        source,
                    })?;
                    toml::from_str::<RegisterConfig>(&text)
                        .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
                }
                None => RegisterConfig::default(),
            };
            let m = PointCloud::load_xyz(&moving)?;
            let f = PointCloud::load_xyz(&fixed)?;
            let reg = register_coarse_to_fine(&m, &f, &fit.gmm, &fit.icp)
                .map_err(|e| PipelineError::Input(e.to_string()))?;
            let t: &RigidTransform = &reg.transform;
            println!(
                "{}",
                to_json(&json!({
                    "transform": t.to_rows(),
                    "final_mse": reg.final_mse,
                    "iterations": reg.iterations_used,
                    "converged": reg.converged,
                }))
            );
            if let Some(path) = aligned {
                let out = PointCloud::new(m.points.iter().map(|p| t.apply(p)).collect());
                out.save_xyz(&path)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are input errors; help and version are not errors.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
