//! Config-driven experiments: a TOML file names a target, schedule, flow
//! family, and mode; the runner turns it into metrics, a summary, and flow
//! checkpoints, deterministically in `(config, seed)`.

pub mod config;
pub mod runner;

pub use config::{
    load_config, parse_config, Algorithm, DeskScale, ExperimentConfig, FlowFamily, Mode,
    TargetKind,
};
pub use runner::{
    resolve_output_dir, run_experiment, MetricsWriter, RunArtifacts, CALIBRATION_RUNS,
    OUTPUT_ROOT_ENV,
};
