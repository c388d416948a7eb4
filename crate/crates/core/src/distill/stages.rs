use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{leakage_metric, loss_recon, DistillConfig, TargetSet};
use crate::diffusion::{ddim_run, ddim_step, eps_to_x0, guided_eps, q_sample, DdimPlan, DenoiserPrior, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::{adam_step, backward_patches, render_patches, render_view, AdamState, PatchGrad, RenderConfig, VoxelField};
use crate::imaging::{mse, Image, PatchSpec};
use crate::scene::Camera;
use crate::seeding::{stream_rng, Component};

/// Gaussian split used for the target high-frequency diagnostic.
pub(crate) const TARGET_HF_SIGMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Stage1,
    Stage2,
    Sds,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Sds => "sds",
        }
    }
}

/// One history entry: a Stage-1 refresh block, or an evaluation interval of
/// Stage 2 or SDS.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub phase: Phase,
    pub index: usize,
    /// Field iterations completed across the whole run when the row closed.
    pub iteration: usize,
    /// Target timestep; for SDS the largest timestep sampled in the interval.
    pub timestep: usize,
    pub resolution: usize,
    /// Mean reconstruction loss over the iterations of this row.
    pub loss: f64,
    /// Mean high-band energy of the targets refreshed for this row.
    pub target_hf: Option<f64>,
    pub holdout_mse: Option<f64>,
    /// Leakage of the field when the row closed, if ground truth is known.
    pub leakage: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct StageOutput {
    pub history: Vec<HistoryRow>,
    /// Last target set used by the stage.
    pub targets: Option<TargetSet>,
}

/// Everything a stage reads but never mutates.
#[derive(Clone, Copy)]
pub struct StageEnv<'a> {
    /// Training cameras; their resolution is ignored in favor of the current rung.
    pub cameras: &'a [Camera],
    pub prior: &'a dyn DenoiserPrior,
    pub sched: &'a NoiseSchedule,
    pub render: &'a RenderConfig,
    /// Held-out cameras and their ground-truth renders.
    pub eval: Option<(&'a [Camera], &'a [Image])>,
    pub gt_field: Option<&'a VoxelField>,
}

impl StageEnv<'_> {
    fn cameras_at(&self, res: usize) -> Vec<Camera> {
        self.cameras.iter().map(|c| c.with_resolution(res, res)).collect()
    }

    fn leakage(&self, field: &VoxelField) -> Result<Option<f64>> {
        self.gt_field.map(|gt| leakage_metric(field, gt)).transpose()
    }

    fn holdout_mse(&self, field: &VoxelField) -> Result<Option<f64>> {
        let Some((cams, gt)) = self.eval else { return Ok(None) };
        let mut total = 0.0;
        for (cam, g) in cams.iter().zip(gt) {
            total += mse(&render_view(field, cam, self.render), g)?;
        }
        Ok(Some(total / cams.len().max(1) as f64))
    }
}

/// Mutable optimizer state carried across stages of one run.
pub struct Optimizer {
    pub adam: AdamState,
    rng: ChaCha8Rng,
    /// Field iterations taken so far.
    pub iteration: usize,
    /// Loss of every iteration, in order.
    pub losses: Vec<f64>,
}

impl Optimizer {
    pub fn new(field: &VoxelField, cfg: &DistillConfig) -> Self {
        Self {
            adam: AdamState::new(field.params().len(), cfg.adam),
            rng: stream_rng(cfg.seed, Component::Patches, 0),
            iteration: 0,
            losses: Vec::new(),
        }
    }

    /// Draws `(view, patch)` pairs for one step.
    fn sample(&mut self, views: usize, res: usize, cfg: &DistillConfig) -> Vec<(usize, PatchSpec)> {
        (0..cfg.patches.count)
            .map(|_| {
                let v = self.rng.random_range(0..views);
                (v, PatchSpec::random(res, res, cfg.patches.size, &mut self.rng))
            })
            .collect()
    }

    /// One Adam step on `loss_recon` between rendered patches and `targets`.
    pub fn step(
        &mut self,
        field: &mut VoxelField,
        cams: &[Camera],
        targets: &[Image],
        render: &RenderConfig,
        cfg: &DistillConfig,
    ) -> Result<f64> {
        let res = cams[0].image_w;
        let picks = self.sample(cams.len(), res, cfg);
        let mut renders = Vec::with_capacity(picks.len());
        let mut crops = Vec::with_capacity(picks.len());
        for &(v, p) in &picks {
            renders.push(render_patches(field, &cams[v], render, &[p])?.remove(0));
            crops.push(targets[v].crop(&p)?);
        }
        self.apply(field, cams, &picks, &renders, &crops, render, cfg)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &mut self,
        field: &mut VoxelField,
        cams: &[Camera],
        picks: &[(usize, PatchSpec)],
        renders: &[Image],
        crops: &[Image],
        render: &RenderConfig,
        cfg: &DistillConfig,
    ) -> Result<f64> {
        let (loss, grads) = loss_recon(renders, crops, cfg.perceptual_weight)?;
        let mut g = vec![0.0; field.params().len()];
        for (&(v, patch), grad) in picks.iter().zip(grads) {
            backward_patches(field, &cams[v], render, &[PatchGrad { patch, grad }], &mut g)?;
        }
        adam_step(field.params_mut(), &g, &mut self.adam)?;
        self.iteration += 1;
        self.losses.push(loss);
        Ok(loss)
    }
}

/// Fixed per-view noise `eps_v` at resolution `res`. `refresh` selects an
/// independent draw per Stage-1 refresh when noise resampling is on.
pub fn view_noise(seed: u64, view: usize, res: usize, refresh: Option<usize>) -> Image {
    let r = refresh.map_or(0, |k| k as u64 + 1);
    let stream = (r << 40) | ((res as u64) << 20) | view as u64;
    Image::random_normal(res, res, &mut stream_rng(seed, Component::ViewNoise, stream))
}

fn noise_set(seed: u64, views: usize, res: usize, refresh: Option<usize>) -> Vec<Image> {
    (0..views).into_par_iter().map(|v| view_noise(seed, v, res, refresh)).collect()
}

/// Rung index per step: `n` rungs, the last reached at step `advance`, the
/// intermediate ones evenly spaced before it.
pub fn rung_schedule(rungs: usize, advance: usize, step: usize) -> usize {
    if rungs <= 1 {
        return 0;
    }
    (1..rungs)
        .filter(|&r| step >= ((r * advance) as f64 / (rungs - 1) as f64).round() as usize)
        .count()
}

/// Per-view `(z_t, eps_hat, x0_hat)` of one guided single step from the renders.
#[allow(clippy::too_many_arguments)]
fn single_step_views(
    field: &VoxelField,
    cameras: &[Camera],
    prior: &dyn DenoiserPrior,
    t: usize,
    sched: &NoiseSchedule,
    cfg_scale: f64,
    eps_set: &[Image],
    render: &RenderConfig,
) -> Result<Vec<(Image, Image, Image)>> {
    if t == 0 {
        return Err(Error::InvalidTimestep(0));
    }
    if eps_set.len() != cameras.len() {
        return Err(Error::dims(format!("{} noise images", cameras.len()), eps_set.len()));
    }
    cameras
        .par_iter()
        .zip(eps_set)
        .enumerate()
        .map(|(v, (cam, eps))| {
            let x = render_view(field, cam, render);
            let z = q_sample(&x, t, eps, sched)?;
            let e = guided_eps(prior, &z, t, Some(v), cfg_scale)?;
            let x0 = eps_to_x0(&z, &e, t, sched)?;
            Ok((z, e, x0))
        })
        .collect()
}

/// Renders every camera, noises with `eps_v` at `t` and keeps the guided one-step
/// clean estimate as the target.
#[allow(clippy::too_many_arguments)]
pub fn refresh_targets_single_step(
    field: &VoxelField,
    cameras: &[Camera],
    prior: &dyn DenoiserPrior,
    t: usize,
    sched: &NoiseSchedule,
    cfg_scale: f64,
    eps_set: &[Image],
    render: &RenderConfig,
) -> Result<TargetSet> {
    let views = single_step_views(field, cameras, prior, t, sched, cfg_scale, eps_set, render)?;
    let targets: Vec<Image> = views.into_iter().map(|(_, _, x0)| x0).collect();
    Ok(TargetSet { timesteps: vec![t; targets.len()], targets, noise: eps_set.to_vec() })
}

/// Latent, noise estimate and timestep per view, kept for `continue_latent`.
type Latents = Vec<(Image, Image, usize)>;

/// Stage 1: walks the first `s1` ladder steps, refreshing targets from the
/// current renders and taking `N` field steps after each refresh.
pub fn stage1_run(
    field: &mut VoxelField,
    env: &StageEnv,
    plan: &DdimPlan,
    cfg: &DistillConfig,
    opt: &mut Optimizer,
    sink: &mut dyn FnMut(&HistoryRow),
) -> Result<StageOutput> {
    let s1 = cfg.stage1_steps().min(plan.k());
    let advance = if s1 < plan.k() { s1 } else { (cfg.ladder_advance * plan.k() as f64).round() as usize };
    let mut out = StageOutput::default();
    let mut fixed_noise: Option<(usize, Vec<Image>)> = None;
    // Previous latent, noise estimate and timestep per view, for `continue_latent`.
    let mut latents: Option<Latents> = None;

    for i in 0..s1 {
        let t = plan.at(i);
        let res = cfg.resolution_ladder[rung_schedule(cfg.resolution_ladder.len(), advance, i)];
        let cams = env.cameras_at(res);
        let eps = if cfg.resample_noise {
            noise_set(cfg.seed, cams.len(), res, Some(i))
        } else {
            match &fixed_noise {
                Some((r, e)) if *r == res => e.clone(),
                _ => {
                    let e = noise_set(cfg.seed, cams.len(), res, None);
                    fixed_noise = Some((res, e.clone()));
                    e
                }
            }
        };
        let targets = if cfg.continue_latent {
            let views = match latents.as_ref().filter(|l| l[0].0.width() == res) {
                Some(prev) => continue_views(prev, t, env, cfg)?,
                None => single_step_views(field, &cams, env.prior, t, env.sched, cfg.stage1_cfg(), &eps, env.render)?,
            };
            let mut next = Vec::with_capacity(views.len());
            let mut xs = Vec::with_capacity(views.len());
            for (z, e, x0) in views {
                next.push((z, e, t));
                xs.push(x0);
            }
            latents = Some(next);
            TargetSet { timesteps: vec![t; xs.len()], targets: xs, noise: eps }
        } else {
            refresh_targets_single_step(field, &cams, env.prior, t, env.sched, cfg.stage1_cfg(), &eps, env.render)?
        };

        let start = opt.losses.len();
        for _ in 0..cfg.iters_per_refresh {
            opt.step(field, &cams, &targets.targets, env.render, cfg)?;
        }
        let row = HistoryRow {
            phase: super::Phase::Stage1,
            index: i,
            iteration: opt.iteration,
            timestep: t,
            resolution: res,
            loss: mean(&opt.losses[start..]),
            target_hf: Some(targets.mean_high_frequency_energy(TARGET_HF_SIGMA)),
            holdout_mse: env.holdout_mse(field)?,
                leakage: env.leakage(field)?,
        };
        sink(&row);
        out.history.push(row);
        out.targets = Some(targets);
    }
    Ok(out)
}

/// Steps each previous latent down to `t` with its own noise estimate and denoises there.
fn continue_views(prev: &Latents, t: usize, env: &StageEnv, cfg: &DistillConfig) -> Result<Vec<(Image, Image, Image)>> {
    prev.par_iter()
        .enumerate()
        .map(|(v, (z_prev, eps_prev, t_prev))| {
            let z = ddim_step(z_prev, eps_prev, *t_prev, t, env.sched)?;
            let e = guided_eps(env.prior, &z, t, Some(v), cfg.stage1_cfg())?;
            let x0 = eps_to_x0(&z, &e, t, env.sched)?;
            Ok((z, e, x0))
        })
        .collect()
}

/// Stage-2 targets after `s1` Stage-1 steps: renders are noised to the boundary
/// timestep and denoised over the remaining ladder. `s1 = 0` starts from `eps_v`
/// alone; `s1 = K` leaves no steps and falls back to a single step at the last
/// Stage-1 timestep.
pub fn stage2_targets(
    field: &VoxelField,
    env: &StageEnv,
    plan: &DdimPlan,
    cfg: &DistillConfig,
    s1: usize,
) -> Result<TargetSet> {
    let k = plan.k();
    let s1 = s1.min(k);
    let res = *cfg.resolution_ladder.last().expect("validated ladder");
    let cams = env.cameras_at(res);
    let eps = noise_set(cfg.seed, cams.len(), res, None);
    let scale = cfg.stage2_cfg();
    if s1 == k {
        return refresh_targets_single_step(field, &cams, env.prior, plan.at(k - 1), env.sched, scale, &eps, env.render);
    }
    let t_b = plan.at(s1);
    let targets = cams
        .par_iter()
        .zip(&eps)
        .enumerate()
        .map(|(v, (cam, e))| {
            let z = if s1 == 0 { e.clone() } else { q_sample(&render_view(field, cam, env.render), t_b, e, env.sched)? };
            ddim_run(&z, t_b, plan, env.prior, Some(v), scale, env.sched)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetSet { timesteps: vec![0; targets.len()], targets, noise: eps })
}

/// Stage 2: optimizes against fixed targets until the budget is spent or the
/// windowed loss plateaus.
pub fn stage2_run(
    field: &mut VoxelField,
    env: &StageEnv,
    targets: &TargetSet,
    cfg: &DistillConfig,
    opt: &mut Optimizer,
    sink: &mut dyn FnMut(&HistoryRow),
) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let budget = cfg.stage2_budget();
    let Some(res) = targets.resolution() else { return Ok(out) };
    if budget == 0 {
        return Ok(out);
    }
    let cams = env.cameras_at(res);
    let every = if cfg.eval_every == 0 { budget } else { cfg.eval_every };
    let start = opt.losses.len();
    let mut row_start = start;
    let mut prev_window: Option<f64> = None;
    for it in 1..=budget {
        opt.step(field, &cams, &targets.targets, env.render, cfg)?;
        let mut stop = false;
        if it % cfg.plateau_window == 0 {
            let w = mean(&opt.losses[opt.losses.len() - cfg.plateau_window..]);
            if let Some(p) = prev_window {
                stop = p <= 0.0 || (p - w) / p < cfg.plateau_tol;
            }
            prev_window = Some(w);
        }
        if it % every == 0 || it == budget || stop {
            let row = HistoryRow {
                phase: Phase::Stage2,
                index: out.history.len(),
                iteration: opt.iteration,
                timestep: 0,
                resolution: res,
                loss: mean(&opt.losses[row_start..]),
                target_hf: (out.history.is_empty()).then(|| targets.mean_high_frequency_energy(TARGET_HF_SIGMA)),
                holdout_mse: env.holdout_mse(field)?,
                leakage: env.leakage(field)?,
            };
            row_start = opt.losses.len();
            sink(&row);
            out.history.push(row);
        }
        if stop {
            break;
        }
    }
    Ok(out)
}

/// Score-distillation baseline: every iteration draws a timestep and fresh noise
/// per sampled view, forms a single-step target and takes one Adam step.
pub fn sds_run(
    field: &mut VoxelField,
    env: &StageEnv,
    cfg: &DistillConfig,
    opt: &mut Optimizer,
    sink: &mut dyn FnMut(&HistoryRow),
) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let iters = cfg.sds.iterations;
    let t_train = env.sched.t_train();
    let advance = (cfg.ladder_advance * iters as f64).round() as usize;
    let every = if cfg.eval_every == 0 { iters.max(1) } else { cfg.eval_every };
    let mut noise_rng = stream_rng(cfg.seed, Component::SdsNoise, 0);
    let mut row_start = opt.losses.len();
    let mut t_hi = 0;
    for i in 0..iters {
        let res = cfg.resolution_ladder[rung_schedule(cfg.resolution_ladder.len(), advance, i)];
        let cams = env.cameras_at(res);
        let t_max = if cfg.sds.anneal_tmax && iters > 1 {
            cfg.sds.t_max_frac + (cfg.sds.t_min_frac - cfg.sds.t_max_frac) * i as f64 / (iters - 1) as f64
        } else {
            cfg.sds.t_max_frac
        };
        let frac = if t_max > cfg.sds.t_min_frac { noise_rng.random_range(cfg.sds.t_min_frac..=t_max) } else { t_max };
        let t = ((frac * t_train as f64).round() as usize).clamp(1, t_train);
        t_hi = t_hi.max(t);

        let picks = opt.sample(cams.len(), res, cfg);
        let noises: Vec<Image> = picks.iter().map(|_| Image::random_normal(res, res, &mut noise_rng)).collect();
        let pairs = picks
            .par_iter()
            .zip(&noises)
            .map(|(&(v, p), eps)| {
                let x = render_view(field, &cams[v], env.render);
                let z = q_sample(&x, t, eps, env.sched)?;
                let e = guided_eps(env.prior, &z, t, Some(v), cfg.cfg_scale)?;
                let target = eps_to_x0(&z, &e, t, env.sched)?;
                Ok((x.crop(&p)?, target.crop(&p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (renders, crops): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        opt.apply(field, &cams, &picks, &renders, &crops, env.render, cfg)?;

        if (i + 1) % every == 0 || i + 1 == iters {
            let row = HistoryRow {
                phase: Phase::Sds,
                index: out.history.len(),
                iteration: opt.iteration,
                timestep: t_hi,
                resolution: res,
                loss: mean(&opt.losses[row_start..]),
                target_hf: None,
                holdout_mse: env.holdout_mse(field)?,
                leakage: env.leakage(field)?,
            };
            row_start = opt.losses.len();
            t_hi = 0;
            sink(&row);
            out.history.push(row);
        }
    }
    Ok(out)
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rungs_switch_at_advance() {
        let r: Vec<_> = (0..20).map(|i| rung_schedule(2, 12, i)).collect();
        assert_eq!(r.iter().filter(|&&x| x == 0).count(), 12);
        assert_eq!(r[12], 1);
        assert_eq!(rung_schedule(2, 0, 0), 1);
        assert_eq!(rung_schedule(1, 5, 9), 0);
        let three: Vec<_> = (0..10).map(|i| rung_schedule(3, 8, i)).collect();
        assert_eq!(three, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
    }
}
