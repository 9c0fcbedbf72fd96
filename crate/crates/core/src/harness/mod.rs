//! Training tasks, optimizers, configuration, metrics, checkpoints, and the
//! library side of the command-line tools.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod task;
pub mod train;

pub use checkpoint::Checkpoint;
pub use commands::{
    analyze, analyze_checkpoint, bench, gradcheck, highway_time_nondecreasing, preset_model, random_batch,
    AnalyzeRow, BenchRow, GradcheckOptions, SuiteResult, ANALYZE_HEADER, BENCH_HEADER, PRESETS,
};
pub use config::TrainConfig;
pub use metrics::{MetricsRow, MetricsWriter};
pub use optim::{Optimizer, OptimizerConfig, Schedule};
pub use task::{Task, TaskKind};
pub use train::{train, StepResult, TrainReport, Trainer};
