use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use lio_core::config::{RunConfig, PRESETS};
use lio_core::dataset_io::{read_poses, read_velodyne_bin, write_poses};
use lio_core::evaluation::{kitti_relative_errors, trajectory_csv, EvalOptions};
use lio_core::nn::gradcheck::standard_suite;
use lio_core::nn::Precision;
use lio_core::pipeline::{
    frame_pairs, load_model, load_sequence, run_sequence, save_model, EpochStats, InferenceMode, PreparedScan, Trainer,
};
use lio_core::registration::register;
use lio_core::synth::{generate_sequence, write_sequence};
use lio_core::{Error, Pose};

#[derive(Parser, Debug)]
#[command(name = "lio", version, about = "Lidar-inertial odometry toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset applied after the config file; repeatable.
    #[arg(long = "preset", global = true)]
    presets: Vec<String>,
    /// `section.key=value` override applied last; repeatable.
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    /// Increase log verbosity.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corridor sequence.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Cache loss-side preprocessed clouds for a sequence.
    Preprocess {
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Classical registration of a scan pair or a whole sequence.
    Register {
        #[arg(long, conflicts_with_all = ["source", "target"])]
        sequence: Option<PathBuf>,
        #[arg(long, requires = "target")]
        source: Option<PathBuf>,
        #[arg(long, requires = "source")]
        target: Option<PathBuf>,
        /// Run directory for poses.txt and config.toml.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unsupervised training on a sequence.
    Train {
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Learned or hybrid odometry over a sequence.
    Infer {
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Learned)]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment-based relative errors between two pose files.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 10)]
        stride: usize,
        /// Also write the per-length report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Pose file to `frame,x,y,z` CSV.
    ExportTraj {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the available presets.
    Presets,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Learned,
    Hybrid,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
                Error::NoCorrespondences { .. } | Error::Numerical(_) => EXIT_NUMERICAL,
                Error::Io { .. } | Error::Format { .. } | Error::Empty(_) | Error::Shape { .. } => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<Numerical>().is_some() {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_DATA
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for p in &common.presets {
        cfg.apply_preset(p)?;
    }
    for s in &common.sets {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, key: Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    flag.or(key)
        .ok_or_else(|| usage(format!("missing --{name} (or data.{name} in the config)")))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Synth {
            out,
            frames,
            seed,
            noise,
        } => {
            if let Some(f) = frames {
                cfg.synth.trajectory.frames = f;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            if let Some(n) = noise {
                cfg.synth.noise_sigma = n;
            }
            let seq = generate_sequence(&cfg.synth)?;
            write_sequence(&out, &seq)?;
            cfg.write_resolved(&out)?;
            println!("wrote {} scans to {}", seq.scans.len(), out.display());
        }
        Command::Preprocess { sequence, cache } => {
            let seq = required(sequence, cfg.data.sequence.clone(), "sequence")?;
            let cache = cache
                .or_else(|| cfg.cache_dir())
                .ok_or_else(|| usage("missing --cache (or LIO_CACHE_DIR, or data.cache_dir)"))?;
            cfg.pipeline.model.imu_mode = lio_core::pipeline::ImuMode::None;
            let data = load_sequence(&seq, &cfg.pipeline, Some(&cache))?;
            cfg.write_resolved(&cache)?;
            println!(
                "{} scans, {} cached already, cache {}",
                data.scans.len(),
                data.cache_hits,
                cache.display()
            );
        }
        Command::Register {
            sequence,
            source,
            target,
            out,
        } => {
            if let (Some(s), Some(t)) = (source, target) {
                let prep = |p: &Path| -> anyhow::Result<PreparedScan> {
                    let cloud = read_velodyne_bin(p)?.to_cloud();
                    Ok(PreparedScan::new(&cloud, &cfg.pipeline)?)
                };
                let (src, tgt) = (prep(&s)?, prep(&t)?);
                let (pose, diag) = register(&src.loss_cloud, &tgt.loss_cloud, &Pose::identity(), &cfg.pipeline.registration)
                    .map_err(Error::from)?;
                println!("{}", lio_core::dataset_io::format_poses(&[pose]).trim_end());
                println!(
                    "loss {:.6} -> {:.6}, {} outer iterations, converged {}",
                    diag.initial_loss, diag.final_loss, diag.outer_iterations, diag.converged
                );
                if let Some(out) = out {
                    cfg.write_resolved(&out)?;
                    write_poses(&out.join("pose.txt"), &[pose])?;
                }
                return Ok(());
            }
            let seq = required(sequence, cfg.data.sequence.clone(), "sequence")?;
            let out = required(out, cfg.data.output.clone(), "output")?;
            cfg.pipeline.model.imu_mode = lio_core::pipeline::ImuMode::None;
            let data = load_sequence(&seq, &cfg.pipeline, cfg.cache_dir().as_deref())?;
            let result = run_sequence(&data.scans, None, None, InferenceMode::Classical, &cfg.pipeline)?;
            cfg.write_resolved(&out)?;
            write_poses(&out.join("poses.txt"), &result.poses)?;
            let failed = result.pairs.iter().filter(|p| p.failure.is_some()).count();
            println!("{} poses written to {}", result.poses.len(), out.join("poses.txt").display());
            if failed > 0 {
                println!("{failed} pairs fell back to identity");
            }
        }
        Command::Train { sequence, out, epochs } => {
            let seq = required(sequence, cfg.data.sequence.clone(), "sequence")?;
            let out = required(out, cfg.data.output.clone(), "output")?;
            if let Some(e) = epochs {
                cfg.pipeline.train.epochs = e;
            }
            let data = load_sequence(&seq, &cfg.pipeline, cfg.cache_dir().as_deref())?;
            cfg.write_resolved(&out)?;
            let pairs = frame_pairs(&data.scans, data.windows.as_deref());
            let mut trainer = Trainer::new(cfg.pipeline.clone());
            let mut metrics = format!("{}\n", EpochStats::CSV_HEADER);
            let every = cfg.pipeline.train.checkpoint_every;
            for epoch in 0..cfg.pipeline.train.epochs {
                let s = trainer.train_epoch(&pairs)?;
                log::info!("epoch {epoch}: loss {:.6} ({} pairs, {} skipped)", s.mean_loss, s.pairs, s.skipped);
                metrics.push_str(&s.csv_row());
                metrics.push('\n');
                std::fs::write(out.join("metrics.csv"), &metrics).context("writing metrics.csv")?;
                if every > 0 && (epoch + 1) % every == 0 {
                    save_model(&trainer.model, &out.join(format!("checkpoint_{:04}.ckpt", epoch + 1)), Precision::F64)?;
                }
            }
            save_model(&trainer.model, &out.join("model.ckpt"), Precision::F64)?;
            println!("trained {} epochs; model at {}", cfg.pipeline.train.epochs, out.join("model.ckpt").display());
        }
        Command::Infer {
            sequence,
            checkpoint,
            mode,
            out,
        } => {
            let seq = required(sequence, cfg.data.sequence.clone(), "sequence")?;
            let out = required(out, cfg.data.output.clone(), "output")?;
            let model = load_model(&checkpoint)?;
            cfg.pipeline.model = model.config.clone();
            let data = load_sequence(&seq, &cfg.pipeline, cfg.cache_dir().as_deref())?;
            let mode = match mode {
                Mode::Learned => InferenceMode::Learned,
                Mode::Hybrid => InferenceMode::Hybrid,
            };
            let result = run_sequence(&data.scans, data.windows.as_deref(), Some(&model), mode, &cfg.pipeline)?;
            cfg.write_resolved(&out)?;
            write_poses(&out.join("poses.txt"), &result.poses)?;
            println!("{} poses written to {}", result.poses.len(), out.join("poses.txt").display());
        }
        Command::Eval { est, gt, stride, csv } => {
            let (e, g) = (read_poses(&est)?, read_poses(&gt)?);
            let opts = EvalOptions {
                stride,
                ..EvalOptions::default()
            };
            let report = kitti_relative_errors(&e, &g, &opts)?;
            print!("{}", report.to_table());
            println!("t_rel {:.2} r_rel {:.2}", report.t_rel, report.r_rel);
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Gradcheck { seeds, tolerance } => {
            let mut worst: Vec<(&'static str, f64, String)> = Vec::new();
            for seed in 0..seeds {
                for r in standard_suite(seed)? {
                    match worst.iter_mut().find(|w| w.0 == r.module) {
                        Some(w) if r.max_rel_error > w.1 => *w = (r.module, r.max_rel_error, r.worst),
                        Some(_) => {}
                        None => worst.push((r.module, r.max_rel_error, r.worst)),
                    }
                }
            }
            let mut failed = false;
            for (module, err, tensor) in &worst {
                let ok = *err < tolerance;
                failed |= !ok;
                println!("{module:<26} {err:.3e} {} ({tensor})", if ok { "ok" } else { "FAIL" });
            }
            if failed {
                return Err(Numerical(format!("relative error above {tolerance}")).into());
            }
        }
        Command::ExportTraj { poses, out } => {
            let p = read_poses(&poses)?;
            std::fs::write(&out, trajectory_csv(&p)).with_context(|| format!("writing {}", out.display()))?;
            println!("{} frames written to {}", p.len(), out.display());
        }
        Command::Presets => {
            for (name, what) in PRESETS {
                println!("{name:<20} {what}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(exit_code(&error))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into()).into()), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Empty("x").into()), EXIT_DATA);
        assert_eq!(exit_code(&Error::NoCorrespondences { max_dist: 1.0 }.into()), EXIT_NUMERICAL);
        assert_eq!(exit_code(&usage("x")), EXIT_USAGE);
        let wrapped = anyhow::Error::from(Error::Numerical("nan".into())).context("training");
        assert_eq!(exit_code(&wrapped), EXIT_NUMERICAL);
    }
}
