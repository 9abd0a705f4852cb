//! Run configuration, dataset files and the end-to-end experiment commands
//! behind the `beamsel` binary.

pub mod commands;
pub mod config;
pub mod dataset;

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_latency, cmd_report, cmd_select_k, cmd_train, cmd_train_from, fusion_warm_start, Checkpoint, EvalReport, EvalRow,
    FullReport, LatencyRow, SelectReport, SelectRow, TablesDocument, TrainMode,
};
pub use config::{Profile, RunConfig};
pub use dataset::{Dataset, DatasetManifest, Sample, Split};
