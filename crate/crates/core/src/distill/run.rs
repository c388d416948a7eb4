use std::time::Instant;

use super::stages::{sds_run, stage1_run, stage2_run, stage2_targets, HistoryRow, Optimizer, StageEnv};
use super::{leakage_metric, DistillConfig, Strategy, TargetSet};
use crate::diffusion::{DdimPlan, DenoiserPrior, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::{render_view, RenderConfig, VoxelField};
use crate::imaging::{mse, perceptual_dist, psnr, psnr_capped, ssim, Image};
use crate::scene::{render_gt, Camera};

/// Ground truth and cameras shared by every strategy run on one scene.
pub struct DistillProblem {
    pub gt_field: VoxelField,
    /// Training cameras at full resolution.
    pub cameras: Vec<Camera>,
    pub holdout: Vec<Camera>,
    pub holdout_gt: Vec<Image>,
    pub render: RenderConfig,
    pub sched: NoiseSchedule,
}

impl DistillProblem {
    /// Renders the held-out ground truth once.
    pub fn new(
        gt_field: VoxelField,
        cameras: Vec<Camera>,
        holdout: Vec<Camera>,
        render: RenderConfig,
        sched: NoiseSchedule,
    ) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidParameter("distillation needs at least one training camera".into()));
        }
        render.validate()?;
        let holdout_gt = render_gt(&gt_field, &holdout, &render)?;
        Ok(Self { gt_field, cameras, holdout, holdout_gt, render, sched })
    }

    fn env<'a>(&'a self, prior: &'a dyn DenoiserPrior) -> StageEnv<'a> {
        StageEnv {
            cameras: &self.cameras,
            prior,
            sched: &self.sched,
            render: &self.render,
            eval: (!self.holdout.is_empty()).then_some((self.holdout.as_slice(), self.holdout_gt.as_slice())),
            gt_field: Some(&self.gt_field),
        }
    }

    /// Held-out metrics of `field`, averaged over views.
    pub fn evaluate(&self, field: &VoxelField) -> Result<HeldOutMetrics> {
        let n = self.holdout.len();
        if n == 0 {
            return Ok(HeldOutMetrics::default());
        }
        let mut m = HeldOutMetrics::default();
        for (cam, g) in self.holdout.iter().zip(&self.holdout_gt) {
            let x = render_view(field, cam, &self.render);
            m.psnr += psnr_capped(psnr(&x, g)?);
            m.ssim += ssim(&x, g)?;
            m.mse += mse(&x, g)?;
            m.perceptual += perceptual_dist(&x, g)?;
        }
        let k = n as f64;
        m.psnr /= k;
        m.ssim /= k;
        m.mse /= k;
        m.perceptual /= k;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeldOutMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub cfg_scale: f64,
    pub stage1_fraction: f64,
    pub metrics: HeldOutMetrics,
    pub leakage: f64,
    pub iterations: usize,
    pub seconds: f64,
    pub history: Vec<HistoryRow>,
    /// Loss of every field iteration.
    pub losses: Vec<f64>,
    /// Targets of the last Stage-1 refresh.
    pub stage1_targets: Option<TargetSet>,
    pub stage2_targets: Option<TargetSet>,
}

impl RunReport {
    /// Effective Stage-1 share of the ladder for this strategy.
    fn fraction(cfg: &DistillConfig) -> f64 {
        match cfg.strategy {
            Strategy::Stage1Only => 1.0,
            Strategy::Stage2Only => 0.0,
            Strategy::Progressive => cfg.stage1_fraction,
            Strategy::Sds => f64::NAN,
        }
    }
}

/// Near-empty gray starting field.
fn initial_field(cfg: &DistillConfig) -> VoxelField {
    VoxelField::uniform(cfg.field_resolution, cfg.init_sigma, cfg.init_gray)
}

fn finish(
    problem: &DistillProblem,
    cfg: &DistillConfig,
    field: &VoxelField,
    opt: Optimizer,
    history: Vec<HistoryRow>,
    targets: (Option<TargetSet>, Option<TargetSet>),
    started: Instant,
) -> Result<RunReport> {
    Ok(RunReport {
        strategy: cfg.strategy,
        seed: cfg.seed,
        cfg_scale: cfg.cfg_scale,
        stage1_fraction: RunReport::fraction(cfg),
        metrics: problem.evaluate(field)?,
        leakage: leakage_metric(field, &problem.gt_field)?,
        iterations: opt.iteration,
        seconds: started.elapsed().as_secs_f64(),
        history,
        losses: opt.losses,
        stage1_targets: targets.0,
        stage2_targets: targets.1,
    })
}

/// Stage 1 over `round(stage1_fraction * K)` ladder steps, then fixed multi-step
/// targets for the rest of the ladder. `Stage1Only` walks the whole ladder with no
/// Stage 2; `Stage2Only` skips Stage 1 and denoises from noise alone.
pub fn distill_progressive(
    problem: &DistillProblem,
    prior: &dyn DenoiserPrior,
    cfg: &DistillConfig,
    sink: &mut dyn FnMut(&HistoryRow),
) -> Result<(VoxelField, RunReport)> {
    cfg.validate()?;
    if cfg.strategy == Strategy::Sds {
        return sds_baseline(problem, prior, cfg, sink);
    }
    let started = Instant::now();
    let plan = DdimPlan::new(cfg.ddim_steps, problem.sched.t_train())?;
    let env = problem.env(prior);
    let mut field = initial_field(cfg);
    let mut opt = Optimizer::new(&field, cfg);

    let s1 = cfg.stage1_steps();
    let stage1 = stage1_run(&mut field, &env, &plan, cfg, &mut opt, sink)?;
    let mut history = stage1.history;
    let mut stage2_set = None;
    if cfg.strategy != Strategy::Stage1Only && (s1 < plan.k() || s1 == 0) {
        let targets = stage2_targets(&field, &env, &plan, cfg, s1)?;
        let stage2 = stage2_run(&mut field, &env, &targets, cfg, &mut opt, sink)?;
        history.extend(stage2.history);
        stage2_set = Some(targets);
    }
    let report = finish(problem, cfg, &field, opt, history, (stage1.targets, stage2_set), started)?;
    Ok((field, report))
}

/// Score-distillation baseline with per-iteration random timesteps.
pub fn sds_baseline(
    problem: &DistillProblem,
    prior: &dyn DenoiserPrior,
    cfg: &DistillConfig,
    sink: &mut dyn FnMut(&HistoryRow),
) -> Result<(VoxelField, RunReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let env = problem.env(prior);
    let mut field = initial_field(cfg);
    let mut opt = Optimizer::new(&field, cfg);
    let out = sds_run(&mut field, &env, cfg, &mut opt, sink)?;
    let mut cfg = cfg.clone();
    cfg.strategy = Strategy::Sds;
    let report = finish(problem, &cfg, &field, opt, out.history, (None, None), started)?;
    Ok((field, report))
}

/// Runs whichever strategy `cfg` names.
pub fn run_strategy(
    problem: &DistillProblem,
    prior: &dyn DenoiserPrior,
    cfg: &DistillConfig,
    sink: &mut dyn FnMut(&HistoryRow),
) -> Result<(VoxelField, RunReport)> {
    match cfg.strategy {
        Strategy::Sds => sds_baseline(problem, prior, cfg, sink),
        _ => distill_progressive(problem, prior, cfg, sink),
    }
}
