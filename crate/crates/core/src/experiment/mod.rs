//! Experiment orchestration: configuration, checkpoints, the training loop
//! and the commands behind the `dream` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod svg;
pub mod train;

pub use checkpoint::Checkpoint;
pub use commands::{
    cmd_compare, cmd_export, cmd_probe, cmd_sample, compare_checkpoints, parse_t_grid, CompareRun, Comparison,
    SampleRow,
};
pub use config::{TrainConfig, TrainMode};
pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use train::{run_training, Dataset};
