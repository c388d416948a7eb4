//! Generates a blob scene, bakes it to a voxel field and writes a few views.
//!
//! cargo run --release --example render_scene -- [seed] [out_dir]

use std::path::PathBuf;

use distillab::field::{render_view, RenderConfig};
use distillab::imaging::write_ppm;
use distillab::scene::{bake_scene, camera_grid, GridParams, SceneSpec};

fn main() -> distillab::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed is an integer")).unwrap_or(0);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/render_scene".into()));
    std::fs::create_dir_all(&out).map_err(|source| distillab::Error::Write { path: out.clone(), source })?;

    let spec = SceneSpec::generate(seed);
    println!("scene {seed}: {} blobs", spec.blobs.len());
    spec.save(out.join("scene.json"))?;

    let field = bake_scene(&spec, 48)?;
    let grid = GridParams { n_az: 4, n_el: 2, ..GridParams::default() };
    let render = RenderConfig::default();
    for (i, cam) in camera_grid(&grid)?.iter().enumerate() {
        let img = render_view(&field, cam, &render);
        let path = out.join(format!("view_{i:02}.ppm"));
        write_ppm(&img, &path)?;
        println!("az {:6.1} el {:6.1} mean {:.3} -> {}", cam.azimuth, cam.elevation, img.mean(), path.display());
    }
    Ok(())
}
