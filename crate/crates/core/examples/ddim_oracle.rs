//! Runs the DDIM ladder with the oracle prior, from pure noise and from a
//! forward-noised ground-truth view, and reports how close each lands.
//!
//! cargo run --release --example ddim_oracle -- [amplitude] [steps]

use distillab::diffusion::{ddim_run, q_sample, DdimPlan, NoiseSchedule};
use distillab::field::RenderConfig;
use distillab::imaging::{high_frequency_energy, psnr, Image};
use distillab::priors::{OracleConfig, OracleDenoiser};
use distillab::scene::{bake_scene, camera_grid, render_gt, GridParams, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> distillab::Result<()> {
    let mut args = std::env::args().skip(1);
    let amplitude: f64 = args.next().map(|s| s.parse().expect("amplitude is a number")).unwrap_or(0.0);
    let k: usize = args.next().map(|s| s.parse().expect("steps is an integer")).unwrap_or(20);

    let gt = bake_scene(&SceneSpec::generate(0), 48)?;
    let views = render_gt(&gt, &camera_grid(&GridParams::default())?, &RenderConfig::default())?;
    let sched = NoiseSchedule::default();
    let plan = DdimPlan::new(k, sched.t_train())?;
    let oracle = OracleDenoiser::new(OracleConfig { amplitude, ..OracleConfig::default() }, &views, sched.clone())?;

    let v = views.len() / 2;
    let g = &views[v];
    let (w, h) = g.dims();
    let eps = Image::random_normal(w, h, &mut ChaCha8Rng::seed_from_u64(1));
    let t_max = plan.at(0);
    println!("view {v}, {k} steps, amplitude {amplitude}, cfg 19");
    println!("{:>5} {:>8} {:>8} {:>8}", "t", "rho", "trust", "blur px");
    for &t in plan.steps().iter().filter(|&&t| t > 0).step_by((k / 5).max(1)) {
        println!("{t:5} {:8.3} {:8.3} {:8.2}", sched.rho(t), oracle.trust(t), oracle.blur_radius(t, w));
    }

    let hf_g = high_frequency_energy(g, 2.0);
    let report = |name: &str, x: &Image| -> distillab::Result<()> {
        println!("{name:<24} psnr {:6.2} dB  hf/gt {:.2}", psnr(x, g)?, high_frequency_energy(x, 2.0) / hf_g);
        Ok(())
    };
    report("from pure noise", &ddim_run(&eps, t_max, &plan, &oracle, Some(v), 19.0, &sched)?)?;
    let z = q_sample(g, t_max, &eps, &sched)?;
    report("from noised ground truth", &ddim_run(&z, t_max, &plan, &oracle, Some(v), 19.0, &sched)?)?;
    let x0 = oracle.predict_x0(&z, t_max, Some(v))?;
    report("single step at t_max", &x0)?;
    Ok(())
}
