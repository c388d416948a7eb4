//! Distillation of a 2D prior into a voxel field: the reconstruction loss,
//! dynamic single-step targets (Stage 1), fixed multi-step targets (Stage 2),
//! their progressive combination, and a score-distillation baseline.

mod leakage;
mod loss;
mod run;
mod stages;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::AdamConfig;
use crate::imaging::Image;

pub use leakage::{leakage_metric, LEAKAGE_DILATION, LEAKAGE_SUPPORT_SIGMA};
pub use loss::{loss_recon, loss_value};
pub use run::{distill_progressive, run_strategy, sds_baseline, DistillProblem, HeldOutMetrics, RunReport};
pub use stages::{
    refresh_targets_single_step, rung_schedule, sds_run, stage1_run, stage2_run, stage2_targets, view_noise,
    HistoryRow, Optimizer, Phase, StageEnv, StageOutput,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Progressive,
    Stage1Only,
    Stage2Only,
    Sds,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Progressive => "progressive",
            Strategy::Stage1Only => "stage1_only",
            Strategy::Stage2Only => "stage2_only",
            Strategy::Sds => "sds",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(Strategy::Progressive),
            "stage1_only" => Ok(Strategy::Stage1Only),
            "stage2_only" => Ok(Strategy::Stage2Only),
            "sds" => Ok(Strategy::Sds),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?} (progressive, stage1_only, stage2_only, sds)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Patches drawn per optimization step. Each patch comes from a uniformly chosen view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub count: usize,
    /// Side length; clipped to the current image side.
    pub size: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { count: 16, size: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsConfig {
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    /// Linearly anneal `t_max_frac` down to `t_min_frac` over the run.
    pub anneal_tmax: bool,
    /// One target refresh and one Adam step per iteration.
    pub iterations: usize,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self { t_min_frac: 0.02, t_max_frac: 0.5, anneal_tmax: false, iterations: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub strategy: Strategy,
    /// DDIM steps `K`.
    pub ddim_steps: usize,
    pub stage1_fraction: f64,
    /// Field iterations per Stage-1 target refresh (`N`).
    pub iters_per_refresh: usize,
    pub cfg_scale: f64,
    /// Per-stage overrides of `cfg_scale`.
    pub stage1_cfg_scale: Option<f64>,
    pub stage2_cfg_scale: Option<f64>,
    /// Stage-2 iteration cap; `None` means `20 * iters_per_refresh`.
    pub stage2_budget: Option<usize>,
    /// Stage 2 stops when the mean loss of a window improves on the previous window
    /// by less than `plateau_tol` (relative).
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub patches: PatchConfig,
    /// Target resolutions, coarse to fine.
    pub resolution_ladder: Vec<usize>,
    /// Share of the Stage-1 ladder (or of the SDS run) after which the finest rung is
    /// in use, when no Stage-1/Stage-2 boundary exists.
    pub ladder_advance: f64,
    pub perceptual_weight: f64,
    pub adam: AdamConfig,
    pub field_resolution: usize,
    pub init_sigma: f64,
    pub init_gray: f64,
    /// Draw fresh `eps_v` at every Stage-1 refresh instead of reusing one per view.
    pub resample_noise: bool,
    /// Experimental: Stage-1 refreshes continue denoising the previous latent instead
    /// of re-noising the current render.
    pub continue_latent: bool,
    pub sds: SdsConfig,
    /// Held-out evaluation interval in iterations for Stage 2 and SDS (0 disables).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Progressive,
            ddim_steps: 100,
            stage1_fraction: 0.6,
            iters_per_refresh: 130,
            cfg_scale: 19.0,
            stage1_cfg_scale: None,
            stage2_cfg_scale: None,
            stage2_budget: None,
            plateau_window: 200,
            plateau_tol: 1e-4,
            patches: PatchConfig::default(),
            resolution_ladder: vec![32, 64],
            ladder_advance: 0.6,
            perceptual_weight: 1.0,
            adam: AdamConfig::default(),
            field_resolution: 48,
            init_sigma: 0.01,
            init_gray: 0.5,
            resample_noise: false,
            continue_latent: false,
            sds: SdsConfig::default(),
            eval_every: 50,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Laptop-sized settings: `K = 20`, `N = 30`, eight 32-pixel patches per step,
    /// targets at 64 px throughout.
    pub fn desk() -> Self {
        Self {
            ddim_steps: 20,
            iters_per_refresh: 30,
            patches: PatchConfig { count: 8, size: 32 },
            resolution_ladder: vec![64],
            adam: AdamConfig { lr: 0.02, ..AdamConfig::default() },
            sds: SdsConfig { iterations: 1500, ..SdsConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return bad(format!("stage1_fraction must be in [0, 1], got {}", self.stage1_fraction));
        }
        if self.ddim_steps == 0 {
            return bad("ddim_steps must be >= 1".into());
        }
        if self.iters_per_refresh == 0 {
            return bad("iters_per_refresh must be >= 1".into());
        }
        for s in [Some(self.cfg_scale), self.stage1_cfg_scale, self.stage2_cfg_scale].into_iter().flatten() {
            if !(s >= 0.0) {
                return bad(format!("cfg scales must be >= 0, got {s}"));
            }
        }
        if !(0.0..=1.0).contains(&self.sds.t_min_frac)
            || !(0.0..=1.0).contains(&self.sds.t_max_frac)
            || self.sds.t_min_frac > self.sds.t_max_frac
        {
            return bad(format!(
                "need 0 <= t_min_frac <= t_max_frac <= 1, got [{}, {}]",
                self.sds.t_min_frac, self.sds.t_max_frac
            ));
        }
        if self.patches.count == 0 || self.patches.size == 0 {
            return bad("patch count and size must be >= 1".into());
        }
        if self.resolution_ladder.is_empty() || self.resolution_ladder.iter().any(|&r| r == 0) {
            return bad("resolution_ladder needs at least one positive rung".into());
        }
        if self.field_resolution < 2 {
            return bad("field_resolution must be >= 2".into());
        }
        if !(self.init_sigma > 0.0) || !(self.init_gray > 0.0 && self.init_gray < 1.0) {
            return bad("init_sigma must be > 0 and init_gray in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.ladder_advance) {
            return bad("ladder_advance must be in [0, 1]".into());
        }
        if self.plateau_window == 0 || !(self.plateau_tol >= 0.0) {
            return bad("plateau_window must be >= 1 and plateau_tol >= 0".into());
        }
        if !(self.perceptual_weight >= 0.0) || !(self.adam.lr > 0.0) {
            return bad("perceptual_weight must be >= 0 and adam.lr > 0".into());
        }
        Ok(())
    }

    /// Number of Stage-1 refreshes for this strategy.
    pub fn stage1_steps(&self) -> usize {
        match self.strategy {
            Strategy::Stage1Only => self.ddim_steps,
            Strategy::Stage2Only => 0,
            Strategy::Progressive => (self.stage1_fraction * self.ddim_steps as f64).round() as usize,
            Strategy::Sds => 0,
        }
    }

    pub fn stage2_budget(&self) -> usize {
        self.stage2_budget.unwrap_or(20 * self.iters_per_refresh)
    }

    pub fn stage1_cfg(&self) -> f64 {
        self.stage1_cfg_scale.unwrap_or(self.cfg_scale)
    }

    pub fn stage2_cfg(&self) -> f64 {
        self.stage2_cfg_scale.unwrap_or(self.cfg_scale)
    }
}

/// One target per training camera plus the noise used to make it.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub targets: Vec<Image>,
    /// Ladder timestep each target was generated at (0 for fully denoised targets).
    pub timesteps: Vec<usize>,
    pub noise: Vec<Image>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn resolution(&self) -> Option<usize> {
        self.targets.first().map(|t| t.width())
    }

    /// Hash over the exact bits of every target, timestep and noise value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (img, t) in self.targets.iter().zip(&self.timesteps) {
            t.hash(&mut h);
            img.dims().hash(&mut h);
            img.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        for img in &self.noise {
            img.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        h.finish()
    }

    /// Mean high-band energy (Gaussian split at `sigma`) over the targets.
    pub fn mean_high_frequency_energy(&self, sigma: f64) -> f64 {
        if self.targets.is_empty() {
            return 0.0;
        }
        self.targets.iter().map(|t| crate::imaging::high_frequency_energy(t, sigma)).sum::<f64>()
            / self.targets.len() as f64
    }
}
