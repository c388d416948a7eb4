//! Held-out metrics on progressively blurred copies of a rendered view.
//!
//! cargo run --release --example image_metrics

use distillab::field::RenderConfig;
use distillab::imaging::{gaussian_blur, high_frequency_energy, mse, perceptual_dist, psnr, split_bands, ssim};
use distillab::scene::{bake_scene, camera_grid, render_gt, GridParams, SceneSpec};

fn main() -> distillab::Result<()> {
    let gt = bake_scene(&SceneSpec::generate(0), 48)?;
    let grid = GridParams { n_az: 1, n_el: 1, ..GridParams::default() };
    let view = render_gt(&gt, &camera_grid(&grid)?, &RenderConfig::default())?.remove(0);
    let hf = high_frequency_energy(&view, 2.0);

    println!("{:>6} {:>9} {:>8} {:>7} {:>11} {:>7}", "sigma", "mse", "psnr", "ssim", "perceptual", "hf/gt");
    for sigma in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let x = if sigma == 0.0 { view.clone() } else { gaussian_blur(&view, sigma) };
        println!(
            "{sigma:6.1} {:9.6} {:8.2} {:7.4} {:11.6} {:7.3}",
            mse(&x, &view)?,
            psnr(&x, &view)?,
            ssim(&x, &view)?,
            perceptual_dist(&x, &view)?,
            high_frequency_energy(&x, 2.0) / hf
        );
    }
    let (low, high) = split_bands(&view, 2.0);
    println!("band split at sigma 2: low mean {:.4}, high mean {:+.2e}", low.mean(), high.mean());
    Ok(())
}
