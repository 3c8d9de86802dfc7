//! Synthetic task, evaluation, parameter accounting, configuration,
//! checkpoints and multi-seed experiments.

mod accounting;
mod checkpoint;
mod config;
mod experiment;
mod metrics;
mod task;

pub use accounting::{count_trainable_parameters, enumerate_trainable_parameters, ParameterCount};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_manifest, save_checkpoint, Manifest, TensorEntry,
    FORMAT_VERSION, MAGIC,
};
pub use config::{load_config, parse_config, ExperimentConfig, KEYS};
pub use experiment::{
    evaluate_split, feature_dump, predict, run_experiment, run_seed, Evaluation, ExperimentOutcome, FeatureKind,
    SampleRecord, SeedRun, SplitTag,
};
pub use metrics::{harmonic_mean, mean_std, MetricsReport, SeedMetrics, Summary};
pub use task::{
    generate_synthetic_task, nearest_centroid_accuracy, Sample, SplitSpec, SyntheticTask, SyntheticTaskSpec,
};
