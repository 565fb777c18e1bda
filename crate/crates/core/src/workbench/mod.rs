//! Synthetic tasks, checkpoints, experiment configuration and the
//! end-to-end pipeline behind the command-line tool.

mod checkpoint;
pub mod commands;
mod config;
mod data;
mod pipeline;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, file_sha256, load_checkpoint, save_checkpoint,
    sha256_hex, CheckpointMeta, Provenance, FORMAT_VERSION, MAGIC,
};
pub use config::{ExperimentConfig, GatherSettings, ModelShape, SEED_ENV};
pub use data::{
    generate_dataset, linear_probe_accuracy, Dataset, Example, GeneratedTask, ProbeFeatures,
    SyntheticTaskSpec, TaskKind,
};
pub use pipeline::{
    ones_variant, random_dense, run_pipeline, teach, train_dense_baseline, PipelineSummary,
    VariantRow, SUMMARY_HEADER,
};
