//! One desk-scale distillation run through the experiment harness.
//!
//! cargo run --release --example progressive_distill -- [strategy] [seed] [out_dir]
//!
//! `strategy` is one of progressive, stage1_only, stage2_only or sds.

use std::path::PathBuf;

use distillab::harness::{run_experiment, ExperimentConfig};

fn main() -> distillab::Result<()> {
    let mut args = std::env::args().skip(1);
    let strategy = args.next().unwrap_or_else(|| "progressive".into());
    let seed = args.next().unwrap_or_else(|| "0".into());
    let out = args.next().unwrap_or_else(|| format!("out/{strategy}-seed{seed}"));

    let mut cfg = ExperimentConfig::load(None, &[format!("distill.strategy={strategy}"), format!("seed={seed}")])?;
    cfg.output.dir = PathBuf::from(out);
    let art = run_experiment(&cfg)?;
    let r = &art.report;

    println!("{:<8} {:>6} {:>5} {:>7} {:>9} {:>8}", "phase", "iter", "t", "loss", "held-out", "leakage");
    for h in &r.history {
        println!(
            "{:<8} {:6} {:5} {:7.4} {:>9} {:>8}",
            h.phase.name(),
            h.iteration,
            h.timestep,
            h.loss,
            h.holdout_mse.map(|m| format!("{m:.5}")).unwrap_or_default(),
            h.leakage.map(|m| format!("{m:.4}")).unwrap_or_default(),
        );
    }
    let m = &r.metrics;
    println!(
        "{}: psnr {:.2} dB, ssim {:.3}, perceptual {:.5}, leakage {:.4}, {} iterations in {:.1} s",
        r.strategy, m.psnr, m.ssim, m.perceptual, r.leakage, r.iterations, r.seconds
    );
    println!("artifacts in {}", art.dir.display());
    Ok(())
}
