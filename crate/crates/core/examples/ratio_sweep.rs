//! Sweeps the Stage-1 share of the DDIM ladder and prints the aggregated table.
//!
//! cargo run --release --example ratio_sweep -- [out_dir] [seeds]
//!
//! `seeds` is comma-separated, e.g. `0,1,2`.

use std::path::PathBuf;

use distillab::harness::{run_sweep, ExperimentConfig, SweepAxis, SweepSpec};

fn main() -> distillab::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/ratio_sweep".into()));
    let seeds: Vec<u64> = args
        .next()
        .unwrap_or_else(|| "0".into())
        .split(',')
        .map(|s| s.trim().parse().expect("seeds are integers"))
        .collect();

    let mut base = ExperimentConfig::default();
    base.output.dir = out;
    let spec = SweepSpec {
        base,
        axis: SweepAxis::Stage1Fraction,
        values: vec!["1.0".into(), "0.6".into(), "0.0".into()],
        seeds,
    };
    let outcome = run_sweep(&spec)?;
    for run in &outcome.runs {
        match &run.result {
            Ok(r) => println!(
                "stage1_fraction {:>4}  seed {}  perceptual {:.5}  leakage {:.4}  psnr {:.2}",
                run.value, run.seed, r.metrics.perceptual, r.leakage, r.metrics.psnr
            ),
            Err(e) => println!("stage1_fraction {:>4}  seed {}  failed: {e}", run.value, run.seed),
        }
    }
    println!("{}", std::fs::read_to_string(&outcome.summary).unwrap_or_default());
    Ok(())
}
