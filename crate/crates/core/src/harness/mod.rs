//! Experiment harness: configuration, the method registry, leave-one-out
//! runs, CSV records and aggregation.

mod config;
mod experiment;
mod methods;
mod records;

pub use config::{Direction, ExperimentConfig, Protocol};
pub use experiment::{
    cohort, compare_kernels, folds, job_grid, load_cohort, run_experiment, write_cohort, ExperimentOutput, Fold,
    COMPARED_KERNELS,
};
pub use methods::{
    derive_seed, unet_config, Adversarial, Ddm, Job, MethodRegistry, Supervised, TrainOutput, TrainingMethod,
    COLLAPSE_PATIENCE, COLLAPSE_TOL,
};
pub use records::{
    aggregate, aggregated_csv, parse_csv, read_csv, series, to_csv, write_csv, RunRecord, Stats, Summary,
    CSV_HEADER, METRICS,
};
