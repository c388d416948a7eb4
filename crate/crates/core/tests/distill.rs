use std::time::Instant;

use distillab::diffusion::NoiseSchedule;
use distillab::distill::{
    loss_recon, loss_value, refresh_targets_single_step, run_strategy, stage2_run, view_noise, DistillConfig,
    DistillProblem, HistoryRow, Optimizer, Phase, StageEnv, Strategy, TargetSet,
};
use distillab::field::{render_view, RenderConfig, VoxelField};
use distillab::imaging::Image;
use distillab::priors::{OracleConfig, OracleDenoiser};
use distillab::scene::{bake_scene, camera_grid, holdout_cameras, render_gt, GridParams, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Tiny {
    problem: DistillProblem,
    oracle: OracleDenoiser,
    gt_views: Vec<Image>,
}

fn tiny(amplitude: f64) -> Tiny {
    let gt = bake_scene(&SceneSpec::generate(0), 16).unwrap();
    let grid = GridParams { n_az: 2, n_el: 2, resolution: 16, ..GridParams::default() };
    let render = RenderConfig { samples_per_ray: 24, ..RenderConfig::default() };
    let cams = camera_grid(&grid).unwrap();
    let gt_views = render_gt(&gt, &cams, &render).unwrap();
    let sched = NoiseSchedule::default();
    let oracle = OracleDenoiser::new(OracleConfig { amplitude, ..OracleConfig::default() }, &gt_views, sched.clone()).unwrap();
    let holdout = holdout_cameras(&grid, 1, 0).unwrap();
    Tiny { problem: DistillProblem::new(gt, cams, holdout, render, sched).unwrap(), oracle, gt_views }
}

fn tiny_cfg(strategy: Strategy) -> DistillConfig {
    let mut c = DistillConfig::desk();
    c.strategy = strategy;
    c.ddim_steps = 5;
    c.iters_per_refresh = 3;
    c.stage2_budget = Some(6);
    c.resolution_ladder = vec![16];
    c.field_resolution = 8;
    c.patches.count = 2;
    c.patches.size = 16;
    c.sds.iterations = 8;
    c.eval_every = 2;
    c
}

fn env<'a>(t: &'a Tiny) -> StageEnv<'a> {
    StageEnv {
        cameras: &t.problem.cameras,
        prior: &t.oracle,
        sched: &t.problem.sched,
        render: &t.problem.render,
        eval: None,
        gt_field: None,
    }
}

fn initial(cfg: &DistillConfig) -> VoxelField {
    VoxelField::uniform(cfg.field_resolution, cfg.init_sigma, cfg.init_gray)
}

#[test]
fn identical_renders_and_targets_give_zero_loss_and_gradient() {
    let x: Vec<Image> = (0..2).map(|s| Image::random_uniform(16, 16, &mut ChaCha8Rng::seed_from_u64(s))).collect();
    let (l, g) = loss_recon(&x, &x, 1.0).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|gi| gi.data().iter().all(|v| v.abs() < 1e-12)));
}

#[test]
fn constant_offset_costs_its_magnitude_without_the_perceptual_term() {
    let y = Image::filled(4, 4, [0.3, 0.5, 0.7]);
    let x = y.map(|v| v - 0.125);
    assert!((loss_value(&[x.clone()], &[y.clone()], 0.0).unwrap() - 0.125).abs() < 1e-15);
    let (l, _) = loss_recon(&[x], &[y], 0.0).unwrap();
    assert!((l - 0.125).abs() < 1e-15);
}

#[test]
fn loss_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Image::random_uniform(16, 16, &mut rng);
    let y = Image::random_uniform(16, 16, &mut rng);
    let (_, g) = loss_recon(&[x.clone()], &[y.clone()], 1.0).unwrap();
    let h = 1e-6;
    for i in [0, 17, 200, 391, 555, 767] {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let fd = (loss_value(&[up], &[y.clone()], 1.0).unwrap() - loss_value(&[down], &[y.clone()], 1.0).unwrap()) / (2.0 * h);
        let a = g[0].data()[i];
        assert!((a - fd).abs() / a.abs().max(fd.abs()) < 1e-3, "pixel {i}: {a} vs {fd}");
    }
}

#[test]
fn single_step_targets_are_reproducible_and_one_per_camera() {
    let t = tiny(0.05);
    let field = initial(&tiny_cfg(Strategy::Progressive));
    let eps: Vec<Image> = (0..t.problem.cameras.len()).map(|v| view_noise(3, v, 16, None)).collect();
    let run = || {
        refresh_targets_single_step(&field, &t.problem.cameras, &t.oracle, 600, &t.problem.sched, 19.0, &eps, &t.problem.render)
            .unwrap()
    };
    let a = run();
    assert_eq!(a.len(), t.problem.cameras.len());
    assert_eq!(a.fingerprint(), run().fingerprint());
    assert!(refresh_targets_single_step(&field, &t.problem.cameras, &t.oracle, 0, &t.problem.sched, 19.0, &eps, &t.problem.render).is_err());
}

/// The plain conditional branch (calibration 1, scale 1) and the calibrated
/// default at its own scale both reproduce the views of the true scene.
#[test]
fn targets_of_the_true_scene_stay_close_at_low_noise() {
    let gt = bake_scene(&SceneSpec::generate(0), 48).unwrap();
    let grid = GridParams { n_az: 2, n_el: 1, ..GridParams::default() };
    let render = RenderConfig::default();
    let cams = camera_grid(&grid).unwrap();
    let views = render_gt(&gt, &cams, &render).unwrap();
    let sched = NoiseSchedule::default();
    let eps: Vec<Image> = (0..cams.len()).map(|v| view_noise(0, v, 64, None)).collect();
    let default = OracleConfig { amplitude: 0.0, ..OracleConfig::default() };
    for (cfg, scale) in [
        (OracleConfig { guidance_calibration: 1.0, ..default.clone() }, 1.0),
        (default.clone(), default.guidance_calibration),
    ] {
        let oracle = OracleDenoiser::new(cfg, &views, sched.clone()).unwrap();
        let set = refresh_targets_single_step(&gt, &cams, &oracle, 20, &sched, scale, &eps, &render).unwrap();
        for (x, g) in set.targets.iter().zip(&views) {
            let d = x.mean_abs_diff(g).unwrap();
            assert!(d < 0.01, "scale {scale}: {d}");
        }
    }
}

#[test]
fn zero_budget_leaves_the_field_unchanged() {
    let t = tiny(0.05);
    let mut cfg = tiny_cfg(Strategy::Stage2Only);
    cfg.stage2_budget = Some(0);
    let mut field = initial(&cfg);
    let before = field.clone();
    let targets = TargetSet { targets: t.gt_views.clone(), timesteps: vec![0; 4], noise: Vec::new() };
    let mut opt = Optimizer::new(&field, &cfg);
    let out = stage2_run(&mut field, &env(&t), &targets, &cfg, &mut opt, &mut |_| {}).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(field, before);
    assert_eq!(opt.iteration, 0);
}

#[test]
fn matching_targets_barely_move_the_field() {
    let t = tiny(0.05);
    let cfg = tiny_cfg(Strategy::Stage2Only);
    let mut field = t.problem.gt_field.to_learned(1e-4, 1e-4);
    let renders: Vec<Image> = t.problem.cameras.iter().map(|c| render_view(&field, c, &t.problem.render)).collect();
    let targets = TargetSet { targets: renders, timesteps: vec![0; 4], noise: Vec::new() };
    let before = field.clone();
    let mut opt = Optimizer::new(&field, &cfg);
    stage2_run(&mut field, &env(&t), &targets, &cfg, &mut opt, &mut |_| {}).unwrap();
    assert!(opt.losses.iter().all(|&l| l < 1e-9), "{:?}", opt.losses);
    let drift = field.params().iter().zip(before.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-6, "drift {drift}");
}

#[test]
fn strategies_record_their_phases() {
    let t = tiny(0.05);
    for (s, stage1, stage2) in [
        (Strategy::Stage1Only, true, false),
        (Strategy::Stage2Only, false, true),
        (Strategy::Progressive, true, true),
    ] {
        let mut rows = Vec::new();
        let (_, rep) = run_strategy(&t.problem, &t.oracle, &tiny_cfg(s), &mut |h: &HistoryRow| rows.push(h.clone())).unwrap();
        assert_eq!(rep.stage1_targets.is_some(), stage1, "{s}");
        assert_eq!(rep.stage2_targets.is_some(), stage2, "{s}");
        assert_eq!(rows.iter().any(|r| r.phase == Phase::Stage1), stage1);
        assert_eq!(rows.iter().any(|r| r.phase == Phase::Stage2), stage2);
        assert!(rows.windows(2).all(|w| w[0].iteration <= w[1].iteration));
        assert_eq!(rep.losses.len(), rep.iterations);
        assert!(rep.metrics.psnr.is_finite() && rep.leakage >= 0.0);
    }
}

#[test]
fn progressive_at_the_fraction_ends_matches_the_single_stage_strategies() {
    let t = tiny(0.05);
    for (fraction, single) in [(1.0, Strategy::Stage1Only), (0.0, Strategy::Stage2Only)] {
        let mut cfg = tiny_cfg(Strategy::Progressive);
        cfg.stage1_fraction = fraction;
        let (fa, ra) = run_strategy(&t.problem, &t.oracle, &cfg, &mut |_| {}).unwrap();
        let (fb, rb) = run_strategy(&t.problem, &t.oracle, &tiny_cfg(single), &mut |_| {}).unwrap();
        assert_eq!(fa, fb, "fraction {fraction}");
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(ra.metrics, rb.metrics);
        assert_eq!(ra.leakage, rb.leakage);
    }
}

#[test]
fn stage1_timesteps_descend() {
    let t = tiny(0.05);
    let mut rows = Vec::new();
    run_strategy(&t.problem, &t.oracle, &tiny_cfg(Strategy::Stage1Only), &mut |h: &HistoryRow| rows.push(h.clone())).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.windows(2).all(|w| w[0].timestep > w[1].timestep));
}

#[test]
fn sds_runs_its_iteration_count() {
    let t = tiny(0.05);
    for anneal in [false, true] {
        let mut cfg = tiny_cfg(Strategy::Sds);
        cfg.sds.anneal_tmax = anneal;
        let (_, rep) = run_strategy(&t.problem, &t.oracle, &cfg, &mut |_| {}).unwrap();
        assert_eq!(rep.iterations, 8);
        assert_eq!(rep.strategy, Strategy::Sds);
        assert!(rep.history.iter().all(|h| h.holdout_mse.is_some()));
    }
}

#[test]
fn runs_are_identical_across_thread_counts() {
    let t = tiny(0.05);
    let cfg = tiny_cfg(Strategy::Progressive);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_strategy(&t.problem, &t.oracle, &cfg, &mut |_| {}).unwrap())
    };
    let (fa, ra) = run(1);
    let (fb, rb) = run(4);
    assert_eq!(fa, fb);
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(ra.stage2_targets.unwrap().fingerprint(), rb.stage2_targets.unwrap().fingerprint());
}

#[test]
fn a_tiny_run_finishes_quickly() {
    let t = tiny(0.05);
    let started = Instant::now();
    run_strategy(&t.problem, &t.oracle, &tiny_cfg(Strategy::Progressive), &mut |_| {}).unwrap();
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn invalid_configs_are_rejected_before_any_work() {
    let t = tiny(0.05);
    let mut cfg = tiny_cfg(Strategy::Progressive);
    cfg.stage1_fraction = 1.5;
    assert!(run_strategy(&t.problem, &t.oracle, &cfg, &mut |_| {}).unwrap_err().is_usage());
    let mut cfg = tiny_cfg(Strategy::Sds);
    cfg.sds.t_min_frac = 0.9;
    assert!(run_strategy(&t.problem, &t.oracle, &cfg, &mut |_| {}).unwrap_err().is_usage());
}
