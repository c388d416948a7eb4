use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use super::config::ExperimentConfig;
use super::experiment::{metrics_row, run_experiment, train_toy, Lab, METRICS_HEADER};
use super::sweep::{run_sweep, SweepAxis, SweepSpec};
use crate::diffusion::NoiseSchedule;
use crate::distill::{leakage_metric, RunReport};
use crate::error::{Error, Result};
use crate::field::{render_view, VoxelField};
use crate::imaging::write_ppm;
use crate::scene::{bake_scene, camera_grid, render_gt, Camera, SceneSpec};

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "DISTILLAB_THREADS";

#[derive(Parser, Debug)]
#[command(name = "distillab", about = "Progressive diffusion-guided distillation lab", arg_required_else_help = true)]
struct Cli {
    /// Experiment config (JSON); defaults apply to missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted override applied after the config file, e.g. distill.cfg_scale=19.0.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: DISTILLAB_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write target sets and ground-truth views as PPM.
    #[arg(long, global = true)]
    dump_images: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a random blob scene and write it as JSON.
    GenScene {
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a saved field from one camera of the configured grid geometry.
    Render {
        #[arg(long)]
        field: PathBuf,
        /// Azimuth and elevation in degrees, "az,el".
        #[arg(long, allow_hyphen_values = true)]
        camera: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy prior on ground-truth views of a scene.
    TrainPrior {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one distillation experiment.
    Distill(OutArg),
    /// Evaluate a saved field against the configured scene.
    Eval {
        #[arg(long)]
        field: PathBuf,
        /// Metrics CSV to write; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one config axis over values and seeds.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_info() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!(
        "{} ({profile}, {}-{})",
        env!("CARGO_PKG_VERSION"),
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// `--threads`, else `DISTILLAB_THREADS`, else 0 (rayon picks the core count).
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        _ => Ok(0),
    }
}

/// Runs the command line and returns the process exit code:
/// 0 success, 1 runtime failure, 2 usage or config error.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let info: &'static str = Box::leak(build_info().into_boxed_str());
    let cmd = Cli::command().version(info);
    let parsed = cmd.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m));
    let args = match parsed {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(args: Cli) -> Result<()> {
    let threads = resolve_threads(args.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut cfg = ExperimentConfig::load(args.config.as_deref(), &args.set)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.dump_images {
        cfg.output.dump_images = true;
    }
    pool.install(|| run_command(args.command, cfg, args.seed))
}

fn run_command(command: Command, mut cfg: ExperimentConfig, seed: Option<u64>) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match command {
        Command::GenScene { out: path } => {
            let spec = SceneSpec::generate(seed.unwrap_or(cfg.scene.seed));
            spec.save(&path)?;
            writeln!(out, "{}", path.display())?;
        }
        Command::Render { field, camera, out: path } => {
            let field = VoxelField::load(&field)?;
            let cam = parse_camera(&camera, &cfg)?;
            write_ppm(&render_view(&field, &cam, &cfg.render), &path)?;
            writeln!(out, "{}", path.display())?;
        }
        Command::TrainPrior { scene, out: path } => {
            if scene.is_some() {
                cfg.scene.path = scene;
            }
            cfg.validate()?;
            let cfg = cfg.resolved();
            let spec = match &cfg.scene.path {
                Some(p) => SceneSpec::load(p)?,
                None => SceneSpec::generate(cfg.scene.seed),
            };
            let gt = bake_scene(&spec, cfg.scene.gt_resolution)?;
            let views = render_gt(&gt, &camera_grid(&cfg.grid)?, &cfg.render)?;
            let sched = NoiseSchedule::new(&cfg.schedule)?;
            train_toy(&views, &sched, &cfg)?.save(&path)?;
            writeln!(out, "{}", path.display())?;
        }
        Command::Distill(o) => {
            if let Some(d) = o.out {
                cfg.output.dir = d;
            }
            let art = run_experiment(&cfg)?;
            print_report(&mut out, &cfg.run_id(), &art.report)?;
        }
        Command::Eval { field, out: path } => {
            let field = VoxelField::load(&field)?;
            let lab = Lab::build(&cfg)?;
            let m = lab.problem.evaluate(&field)?;
            let leakage = leakage_metric(&field, &lab.problem.gt_field)?;
            let header = ["psnr", "ssim", "mse", "perceptual", "leakage"];
            let row = [m.psnr, m.ssim, m.mse, m.perceptual, leakage].map(|v| v.to_string());
            if let Some(p) = path {
                let mut w = csv::Writer::from_path(&p)?;
                w.write_record(header)?;
                w.write_record(&row)?;
                w.flush()?;
            }
            writeln!(out, "{}\n{}", header.join(","), row.join(","))?;
        }
        Command::Sweep { axis, values, seeds, out: o } => {
            if let Some(d) = o.out {
                cfg.output.dir = d;
            }
            let values = if values.is_empty() { axis.default_values() } else { values };
            let outcome = run_sweep(&SweepSpec { base: cfg, axis, values, seeds })?;
            let failed = outcome.runs.iter().filter(|r| r.result.is_err()).count();
            writeln!(out, "{}", outcome.summary.display())?;
            if failed > 0 {
                return Err(Error::RunFailed(format!("{failed} of {} sweep runs failed", outcome.runs.len())));
            }
        }
    }
    Ok(())
}

fn print_report(out: &mut impl Write, run_id: &str, r: &RunReport) -> Result<()> {
    writeln!(out, "{}", METRICS_HEADER.join(","))?;
    writeln!(out, "{}", metrics_row(run_id, r).join(","))?;
    Ok(())
}

fn parse_camera(s: &str, cfg: &ExperimentConfig) -> Result<Camera> {
    let bad = || Error::Config(format!("camera {s:?} is not \"az,el\" in degrees"));
    let (az, el) = s.split_once(',').ok_or_else(bad)?;
    let az: f64 = az.trim().parse().map_err(|_| bad())?;
    let el: f64 = el.trim().parse().map_err(|_| bad())?;
    let g = &cfg.grid;
    let cam = Camera::new(az, el, g.radius, g.fov_y, g.resolution, g.resolution);
    cam.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cam)
}
