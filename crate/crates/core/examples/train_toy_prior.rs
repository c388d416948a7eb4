//! Trains the small convolutional prior on ground-truth views and checks
//! single-step denoising against the raw rescaled input.
//!
//! cargo run --release --example train_toy_prior -- [steps] [weights_out]

use distillab::diffusion::{eps_to_x0, q_sample, NoiseSchedule};
use distillab::field::RenderConfig;
use distillab::imaging::{psnr, Image};
use distillab::priors::{toy_predict_eps, toy_train, ToyDenoiser, ToyTrainConfig};
use distillab::scene::{bake_scene, camera_grid, render_gt, GridParams, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> distillab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse().expect("steps is an integer")).unwrap_or(2000);
    let out = args.next();

    let gt = bake_scene(&SceneSpec::generate(0), 48)?;
    let grid = GridParams { n_az: 4, n_el: 4, resolution: 32, ..GridParams::default() };
    let views = render_gt(&gt, &camera_grid(&grid)?, &RenderConfig::default())?;
    let data: Vec<(usize, Image)> = views.iter().cloned().enumerate().collect();
    let sched = NoiseSchedule::default();

    let mut den = ToyDenoiser::new(data.len(), sched.t_train(), 0);
    let trace = toy_train(&mut den, &data, &sched, &ToyTrainConfig { steps, ..ToyTrainConfig::default() }, 0)?;
    for i in (0..trace.smoothed.len()).step_by((steps / 10).max(1)) {
        println!("step {i:5}  loss {:.4}  smoothed {:.4}", trace.raw[i], trace.smoothed[i]);
    }
    if let (Some(a), Some(b)) = (trace.initial(), trace.last()) {
        println!("smoothed loss {a:.4} -> {b:.4} ({:.0}%)", 100.0 * b / a);
    }

    let t = (0.2 * sched.t_train() as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut raw, mut denoised) = (0.0, 0.0);
    for (v, g) in &data {
        let eps = Image::random_normal(g.width(), g.height(), &mut rng);
        let z = q_sample(g, t, &eps, &sched)?;
        raw += psnr(&z.scale(1.0 / sched.alpha_bar(t).sqrt()), g)?;
        denoised += psnr(&eps_to_x0(&z, &toy_predict_eps(&den, &z, t, Some(*v))?, t, &sched)?, g)?;
    }
    let n = data.len() as f64;
    println!("t = {t}: rescaled input {:.2} dB, one denoising step {:.2} dB", raw / n, denoised / n);
    if let Some(p) = out {
        den.save(&p)?;
        println!("weights -> {p}");
    }
    Ok(())
}
