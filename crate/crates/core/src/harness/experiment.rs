use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, PriorKind};
use crate::diffusion::{DenoiserPrior, NoiseSchedule};
use crate::distill::{run_strategy, DistillProblem, HistoryRow, RunReport, TargetSet};
use crate::error::{Error, Result};
use crate::field::render_view;
use crate::imaging::{write_ppm, Image};
use crate::priors::{toy_train, OracleDenoiser, ToyDenoiser};
use crate::scene::{bake_scene, camera_grid, holdout_cameras, render_gt, SceneSpec};

pub const METRICS_HEADER: [&str; 11] =
    ["run_id", "strategy", "seed", "cfg_scale", "stage1_fraction", "psnr", "ssim", "mse", "perceptual", "leakage", "iterations"];
pub const HISTORY_HEADER: [&str; 10] =
    ["run_id", "phase", "index", "iteration", "timestep", "resolution", "loss", "target_hf", "holdout_mse", "leakage"];
pub const TIMING_HEADER: [&str; 3] = ["run_id", "iterations", "seconds"];

/// Ground truth, cameras and prior assembled from a config.
pub struct Lab {
    pub spec: SceneSpec,
    pub problem: DistillProblem,
    /// Ground-truth renders of the training cameras.
    pub gt_views: Vec<Image>,
    pub prior: Box<dyn DenoiserPrior>,
}

impl Lab {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        let spec = match &cfg.scene.path {
            Some(p) => SceneSpec::load(p)?,
            None => SceneSpec::generate(cfg.scene.seed),
        };
        let gt = bake_scene(&spec, cfg.scene.gt_resolution)?;
        let cameras = camera_grid(&cfg.grid)?;
        let holdout = if cfg.holdout == 0 { Vec::new() } else { holdout_cameras(&cfg.grid, cfg.holdout, cfg.seed)? };
        let gt_views = render_gt(&gt, &cameras, &cfg.render)?;
        let sched = NoiseSchedule::new(&cfg.schedule)?;
        let prior: Box<dyn DenoiserPrior> = match cfg.prior.kind {
            PriorKind::Oracle => Box::new(OracleDenoiser::new(cfg.prior.oracle.clone(), &gt_views, sched.clone())?),
            PriorKind::Toy => Box::new(match &cfg.prior.toy_weights {
                Some(p) => ToyDenoiser::load(p)?,
                None => train_toy(&gt_views, &sched, &cfg)?,
            }),
        };
        let problem = DistillProblem::new(gt, cameras, holdout, cfg.render.clone(), sched)?;
        Ok(Self { spec, problem, gt_views, prior })
    }
}

/// Trains a toy prior on the ground-truth training views.
pub fn train_toy(gt_views: &[Image], sched: &NoiseSchedule, cfg: &ExperimentConfig) -> Result<ToyDenoiser> {
    let data: Vec<(usize, Image)> = gt_views.iter().cloned().enumerate().collect();
    let mut den = ToyDenoiser::new(data.len(), sched.t_train(), cfg.seed);
    toy_train(&mut den, &data, sched, &cfg.prior.toy_train, cfg.seed)?;
    Ok(den)
}

/// Files written for one run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: RunReport,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Write { path: dir.to_path_buf(), source })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Write { path: path.to_path_buf(), source },
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics row in [`METRICS_HEADER`] order.
pub fn metrics_row(run_id: &str, r: &RunReport) -> Vec<String> {
    let m = &r.metrics;
    vec![
        run_id.to_string(),
        r.strategy.to_string(),
        r.seed.to_string(),
        r.cfg_scale.to_string(),
        r.stage1_fraction.to_string(),
        m.psnr.to_string(),
        m.ssim.to_string(),
        m.mse.to_string(),
        m.perceptual.to_string(),
        r.leakage.to_string(),
        r.iterations.to_string(),
    ]
}

/// Bakes the scene, builds the prior, distills, evaluates and writes
/// `config.json`, `metrics.csv`, `history.csv`, `timing.csv`, `field.bin` and the
/// held-out renders into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let cfg = cfg.resolved();
    let lab = Lab::build(&cfg)?;
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    let run_id = cfg.run_id();
    write_text(&dir.join("config.json"), &cfg.to_json()?)?;

    let mut sink = |_: &HistoryRow| {};
    let (field, report) = run_strategy(&lab.problem, lab.prior.as_ref(), &cfg.distill, &mut sink)?;

    let mut w = csv_writer(&dir.join("metrics.csv"))?;
    w.write_record(METRICS_HEADER)?;
    w.write_record(metrics_row(&run_id, &report))?;
    w.flush()?;

    let mut w = csv_writer(&dir.join("history.csv"))?;
    w.write_record(HISTORY_HEADER)?;
    for h in &report.history {
        w.write_record([
            run_id.clone(),
            h.phase.name().to_string(),
            h.index.to_string(),
            h.iteration.to_string(),
            h.timestep.to_string(),
            h.resolution.to_string(),
            h.loss.to_string(),
            opt(h.target_hf),
            opt(h.holdout_mse),
            opt(h.leakage),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("timing.csv"))?;
    w.write_record(TIMING_HEADER)?;
    w.write_record([run_id.clone(), report.iterations.to_string(), format!("{:.3}", report.seconds)])?;
    w.flush()?;

    field.save(dir.join("field.bin"))?;
    for (i, cam) in lab.problem.holdout.iter().enumerate() {
        write_ppm(&render_view(&field, cam, &lab.problem.render), dir.join(format!("holdout_{i:02}.ppm")))?;
    }
    if cfg.output.dump_images {
        dump_images(&dir, &lab, &report)?;
    }
    Ok(RunArtifacts { dir, report })
}

fn dump_images(dir: &Path, lab: &Lab, report: &RunReport) -> Result<()> {
    let img_dir = dir.join("images");
    create_dir(&img_dir)?;
    for (i, g) in lab.problem.holdout_gt.iter().enumerate() {
        write_ppm(g, img_dir.join(format!("holdout_gt_{i:02}.ppm")))?;
    }
    let dump = |name: &str, set: &Option<TargetSet>| -> Result<()> {
        if let Some(set) = set {
            for (v, t) in set.targets.iter().enumerate() {
                write_ppm(t, img_dir.join(format!("{name}_{v:03}.ppm")))?;
            }
        }
        Ok(())
    };
    dump("stage1_target", &report.stage1_targets)?;
    dump("stage2_target", &report.stage2_targets)?;
    for (v, g) in lab.gt_views.iter().enumerate() {
        write_ppm(g, img_dir.join(format!("gt_{v:03}.ppm")))?;
    }
    Ok(())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Write { path: path.to_path_buf(), source })
}
