//! Compares the analytic renderer gradient with central finite differences.
//!
//! cargo run --release --example gradient_check -- [seed]

use distillab::field::{backward, render_view, Activation, RenderConfig, VoxelField};
use distillab::imaging::Image;
use distillab::scene::Camera;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn objective(field: &VoxelField, cam: &Camera, render: &RenderConfig, weights: &Image) -> f64 {
    let img = render_view(field, cam, render);
    img.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum()
}

fn main() -> distillab::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed is an integer")).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = 8;
    let params: Vec<f64> = (0..res * res * res * 4).map(|_| rng.random_range(-2.0..1.0)).collect();
    let mut field = VoxelField::from_params(res, Activation::SoftplusSigmoid, params)?;
    let cam = Camera::new(20.0, 10.0, 2.5, 40.0, 4, 4);
    let render = RenderConfig::default();
    let weights = Image::random_normal(4, 4, &mut rng);

    let grad = backward(&field, &cam, &render, &weights)?;
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    // Only parameters the camera sees carry a gradient worth checking.
    let mut live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-6).collect();
    live.shuffle(&mut rng);
    for &i in live.iter().take(10) {
        let x = field.params()[i];
        field.params_mut()[i] = x + h;
        let up = objective(&field, &cam, &render, &weights);
        field.params_mut()[i] = x - h;
        let down = objective(&field, &cam, &render, &weights);
        field.params_mut()[i] = x;
        let fd = (up - down) / (2.0 * h);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
        println!("param {i:5}  analytic {:+.6e}  finite-diff {:+.6e}  rel {rel:.2e}", grad[i], fd);
    }
    println!("worst relative error {worst:.2e} over {} live parameters", live.len().min(10));
    Ok(())
}
