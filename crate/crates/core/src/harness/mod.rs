//! Configuration, experiment orchestration, sweeps and the command line.
//!
//! Every run directory holds `config.json` (the resolved config, enough to
//! reproduce the run bit-exactly), `metrics.csv`, `history.csv`, `timing.csv`,
//! `field.bin` and the held-out renders as PPM. Wall-clock time lives only in
//! `timing.csv` so the other files are byte-identical across reruns.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod sweep;

pub use cli::{cli, resolve_threads, THREADS_ENV};
pub use config::{apply_override, ExperimentConfig, OutputConfig, PriorConfig, PriorKind, SceneConfig};
pub use experiment::{
    metrics_row, run_experiment, train_toy, Lab, RunArtifacts, HISTORY_HEADER, METRICS_HEADER, TIMING_HEADER,
};
pub use sweep::{mean_std, run_sweep, SweepAxis, SweepOutcome, SweepRun, SweepSpec, SWEEP_HEADER};
