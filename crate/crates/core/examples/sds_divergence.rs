//! Score-distillation baseline with a capped timestep range versus a range
//! whose upper end anneals down to the lower one.
//!
//! cargo run --release --example sds_divergence -- [seed] [iterations]

use distillab::distill::{run_strategy, HistoryRow, Strategy};
use distillab::harness::{ExperimentConfig, Lab};

fn main() -> distillab::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed is an integer")).unwrap_or(0);
    let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    cfg.distill.strategy = Strategy::Sds;
    if let Some(n) = std::env::args().nth(2) {
        cfg.distill.sds.iterations = n.parse().expect("iterations is an integer");
    }
    let lab = Lab::build(&cfg)?;

    for anneal in [false, true] {
        let mut run = cfg.resolved();
        run.distill.sds.anneal_tmax = anneal;
        let mut curve = Vec::new();
        let mut sink = |h: &HistoryRow| {
            if let Some(m) = h.holdout_mse {
                curve.push((h.iteration, m));
            }
        };
        run_strategy(&lab.problem, lab.prior.as_ref(), &run.distill, &mut sink)?;
        let min = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let last = curve.last().map(|c| c.1).unwrap_or(f64::NAN);
        println!("{}", if anneal { "annealed t_max" } else { "capped t range" });
        for (it, m) in &curve {
            println!("  iter {it:5}  held-out mse {m:.5}");
        }
        println!("  final / minimum = {:.2}", last / min);
    }
    Ok(())
}
