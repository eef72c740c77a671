use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use roadcal::pipeline::io::{
    emit_calibration, emit_plot_data, ingest_detections, ingest_intrinsics, ingest_localization, read_calibration,
    write_detections, write_intrinsics, write_localization,
};
use roadcal::pipeline::{
    evaluate_calibration, run_calibration, CalibrationDocument, Detections, PipelineConfig, PipelineError,
};
use roadcal::synthgen::{generate, ScenarioConfig, VehicleId};

#[derive(Parser)]
#[command(
    name = "roadcal",
    version,
    about = "Extrinsic calibration of roadside cameras from a localized vehicle"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set ransac.inlier_threshold_px=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Detections carry stable track ids; skip the tracker.
    #[arg(long)]
    pretracked: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = PipelineConfig::load(self.config.as_deref(), std::env::vars(), &self.overrides)?;
        if self.pretracked {
            cfg.pretracked = true;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the camera pose from detections and a localization log.
    Calibrate {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        localization: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Calibration output (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Full run report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Distance-binned δ_p table (CSV).
        #[arg(long)]
        plot_data: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic scenario in the formats `calibrate` reads.
    Simulate {
        /// Scenario description (TOML).
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Replace the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the true identity as the detector id of every box, one id per
        /// target lap.
        #[arg(long)]
        with_ids: bool,
    },
    /// Score an existing calibration on recorded data.
    Evaluate {
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        localization: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the effective configuration, or summarize a calibration file.
    Inspect {
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Calibrate {
            detections,
            localization,
            intrinsics,
            out,
            report,
            plot_data,
            config,
        } => {
            let cfg = config.load()?;
            let dets = ingest_detections(&detections)?;
            let loc = ingest_localization(&localization, &cfg.lever_arm)?;
            let intr = ingest_intrinsics(&intrinsics)?;
            let output = run_calibration(&cfg, &dets, &loc, &intr)?;
            emit_calibration(
                &CalibrationDocument::from_result(&output.result, &intr, cfg.hash()),
                &out,
            )?;
            if let Some(path) = report {
                write_text(&path, &to_json(&output.report))?;
            }
            if let Some(path) = plot_data {
                emit_plot_data(&output.report.distance_bins, &path)?;
            }
            let m = &output.report.metrics;
            println!(
                "calibrated from {} tracks ({:?}): delta_p mean {:.3} m, max {:.3} m, e mean {:.2}%, max {:.2}%",
                output.result.member_track_ids.len(),
                output.result.selection,
                m.delta_p_mean_m,
                m.delta_p_max_m,
                m.e_mean_percent,
                m.e_max_percent
            );
            Ok(())
        }
        Command::Simulate {
            scenario,
            out_dir,
            seed,
            with_ids,
        } => {
            let text = std::fs::read_to_string(&scenario)
                .map_err(|e| PipelineError::Input(format!("{}: {e}", scenario.display())))?;
            let mut sc: ScenarioConfig =
                toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", scenario.display())))?;
            if let Some(s) = seed {
                sc.rng_seed = s;
            }
            let generated = generate(&sc).map_err(|e| PipelineError::Config(e.to_string()))?;
            std::fs::create_dir_all(&out_dir).map_err(|e| PipelineError::Io(format!("{}: {e}", out_dir.display())))?;
            // target laps get ids 0..laps, distractors follow
            let truth = &generated.truth;
            let laps = truth.traversal_windows.len() as u64;
            let ids = with_ids.then(|| {
                truth
                    .identities
                    .iter()
                    .zip(&generated.frames)
                    .map(|(frame, f)| {
                        frame
                            .iter()
                            .map(|id| match id {
                                VehicleId::Target => {
                                    truth.traversal_windows.iter().take_while(|w| w.1 < f.timestamp).count() as u64
                                }
                                VehicleId::Distractor(k) => laps + *k as u64,
                            })
                            .collect()
                    })
                    .collect()
            });
            let dets = Detections {
                frames: generated.frames,
                ids,
            };
            write_detections(&out_dir.join("detections.csv"), &dets)?;
            write_localization(&out_dir.join("localization.csv"), &generated.localization)?;
            write_intrinsics(&out_dir.join("intrinsics.toml"), &sc.intrinsics)?;
            let truth = CalibrationDocument::new(&generated.truth.calibration, &sc.intrinsics, None, String::new());
            emit_calibration(&truth, &out_dir.join("truth.json"))?;
            println!(
                "wrote {} frames, {} boxes, {} localization samples to {}",
                dets.frames.len(),
                dets.box_count(),
                generated.localization.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Evaluate {
            calibration,
            detections,
            localization,
            intrinsics,
            config,
        } => {
            let cfg = config.load()?;
            let calib = read_calibration(&calibration)?.calibration()?;
            let dets = ingest_detections(&detections)?;
            let loc = ingest_localization(&localization, &cfg.lever_arm)?;
            let intr = ingest_intrinsics(&intrinsics)?;
            let report = evaluate_calibration(&cfg, &calib, &dets, &loc, &intr)?;
            println!("{}", to_json(&report));
            Ok(())
        }
        Command::Inspect { calibration, config } => {
            match calibration {
                Some(path) => {
                    let doc = read_calibration(&path)?;
                    let calib = doc.calibration()?;
                    let c = calib.center_utm();
                    println!("camera center (UTM): {:.3} {:.3} {:.3}", c.x, c.y, c.z);
                    let q = doc.quaternion_wxyz.map(|v| v.0);
                    println!(
                        "quaternion (w, x, y, z): {:.9} {:.9} {:.9} {:.9}",
                        q[0], q[1], q[2], q[3]
                    );
                    if let Some(m) = &doc.metrics {
                        println!(
                            "delta_p mean {:.3} m, max {:.3} m over {} pairs",
                            m.delta_p_mean_m.0, m.delta_p_max_m.0, m.pair_count
                        );
                    }
                }
                None => {
                    let cfg = config.load()?;
                    println!("# sha256 {}", cfg.hash());
                    print!("{}", cfg.to_toml());
                }
            }
            Ok(())
        }
    }
}
