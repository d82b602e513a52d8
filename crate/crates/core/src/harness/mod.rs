//! Training loop, evaluation grid, plot-data emission and the check suites
//! behind the command-line interface.

pub mod check;
pub mod config;
pub mod emit;
pub mod grid;
pub mod optim;
pub mod train;

pub use config::{Alpha, ExperimentConfig, GridConfig, Method, TrainConfig};
pub use train::{class_recall, per_class_accuracy, train, EvalRecord, RunRecord, TrainOutput, Trainer};
