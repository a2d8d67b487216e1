//! Training runs, grid sweeps, result tables and plots.

pub mod config;
pub mod dataset;
pub mod plot;
pub mod results;
pub mod sweep;
pub mod train;

pub use config::{DataSource, TrainConfig};
pub use dataset::{load_examples, prepare_data, resolve_dataset, resolve_official, Examples, PreparedData, DATA_DIR_ENV};
pub use plot::emit_plots;
pub use results::{epsilon_table, EpsilonTable, ResultRow};
pub use sweep::{sweep, SweepGrid, SweepResult};
pub use train::{evaluate, train, train_all, RunResult};
