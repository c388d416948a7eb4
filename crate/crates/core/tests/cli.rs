use std::path::Path;
use std::process::{Command, Output};

fn distillab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distillab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DISTILLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn version_exits_zero_and_names_the_crate_version() {
    let dir = tempfile::tempdir().unwrap();
    let o = distillab(&["--version"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&distillab(&[], dir.path())), 2);
    assert_eq!(code(&distillab(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&distillab(&["distill", "--bogus"], dir.path())), 2);
    assert_eq!(code(&distillab(&["sweep", "--axis", "nope"], dir.path())), 2);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&distillab(&["--set", "distill.nope=1", "distill"], dir.path())), 2);
    assert_eq!(code(&distillab(&["--set", "distill.stage1_fraction=3", "distill"], dir.path())), 2);
    assert_eq!(code(&distillab(&["--config", "missing.json", "distill"], dir.path())), 2);
    std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    assert_eq!(code(&distillab(&["--config", "bad.json", "distill"], dir.path())), 2);
    assert_eq!(code(&distillab(&["--threads", "x", "distill"], dir.path())), 2);
}

#[test]
fn bad_thread_env_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_distillab"))
        .args(["gen-scene", "--out", "s.json"])
        .current_dir(dir.path())
        .env("DISTILLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn unreadable_inputs_are_usage_errors_but_corrupt_ones_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&distillab(&["eval", "--field", "absent.bin"], dir.path())), 2);
    std::fs::write(dir.path().join("junk.bin"), b"not a field").unwrap();
    assert_eq!(code(&distillab(&["render", "--field", "junk.bin", "--camera", "0,0", "--out", "x.ppm"], dir.path())), 1);
}

#[test]
fn gen_scene_then_render_and_eval_the_baked_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = distillab(&["--seed", "3", "gen-scene", "--out", "scene.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let spec = distillab::scene::SceneSpec::load(dir.path().join("scene.json")).unwrap();
    assert_eq!(spec, distillab::scene::SceneSpec::generate(3));

    let gt = distillab::scene::bake_scene(&spec, 48).unwrap();
    gt.save(dir.path().join("gt.bin")).unwrap();
    let o = distillab(&["render", "--field", "gt.bin", "--camera", "-10,5", "--out", "v.ppm"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let img = distillab::imaging::read_ppm(dir.path().join("v.ppm")).unwrap();
    assert_eq!(img.dims(), (64, 64));

    // The ground truth against itself: zero error, only sub-threshold density outside its support.
    let o = distillab(
        &["--set", "scene.path=\"scene.json\"", "--set", "holdout=2", "eval", "--field", "gt.bin", "--out", "m.csv"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("psnr,ssim,mse,perceptual,leakage"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    // The field file stores f32.
    assert!(row[2] < 1e-12);
    assert!(row[4] < distillab::distill::LEAKAGE_SUPPORT_SIGMA);
}

#[test]
fn bad_camera_string_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let gt = distillab::scene::bake_scene(&distillab::scene::SceneSpec::generate(0), 8).unwrap();
    gt.save(dir.path().join("gt.bin")).unwrap();
    let o = distillab(&["render", "--field", "gt.bin", "--camera", "north", "--out", "v.ppm"], dir.path());
    assert_eq!(code(&o), 2);
    let o = distillab(&["render", "--field", "gt.bin", "--camera", "0,95", "--out", "v.ppm"], dir.path());
    assert_eq!(code(&o), 2);
}

/// A tiny config so a full distill run through the binary takes a few seconds.
const TINY: &[&str] = &[
    "--set", "scene.gt_resolution=16",
    "--set", "grid.n_az=2",
    "--set", "grid.n_el=2",
    "--set", "grid.resolution=16",
    "--set", "holdout=1",
    "--set", "render.samples_per_ray=16",
    "--set", "distill.field_resolution=8",
    "--set", "distill.ddim_steps=4",
    "--set", "distill.iters_per_refresh=2",
    "--set", "distill.stage2_budget=4",
    "--set", "distill.resolution_ladder=[16]",
    "--set", "distill.patches.count=2",
    "--set", "distill.patches.size=16",
];

#[test]
fn distill_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY.to_vec();
    args.extend(["--threads", "1", "--dump-images", "distill", "--out", "run"]);
    let o = distillab(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in ["config.json", "metrics.csv", "history.csv", "timing.csv", "field.bin", "holdout_00.ppm"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("images").join("stage2_target_000.ppm").is_file());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("run_id,strategy,seed"));

    // The saved field evaluates to the metrics the run reported.
    let o = distillab(&[TINY, &["eval", "--field", "run/field.bin"]].concat(), dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_writes_one_summary_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY.to_vec();
    args.extend(["sweep", "--axis", "cfg_scale", "--values", "1,19", "--seeds", "0,1", "--out", "sw"]);
    let o = distillab(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let runs = std::fs::read_to_string(dir.path().join("sw/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    assert!(dir.path().join("sw/cfg_scale=19/seed1/metrics.csv").is_file());
}

#[test]
fn train_prior_writes_loadable_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY.to_vec();
    args.extend(["--set", "prior.toy_train.steps=3", "train-prior", "--out", "toy.bin"]);
    let o = distillab(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let den = distillab::priors::ToyDenoiser::load(dir.path().join("toy.bin")).unwrap();
    assert_eq!(den.num_views(), 4);
}
