//! File formats, the on-disk chunk store, and the experiment harness for
//! `clc-core`. The `clc` binary is a thin wrapper over this crate.

pub mod analyze;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod report;
pub mod store;
pub mod tune;
pub mod weights_io;

mod binio;

pub use config::{ConfigError, ExperimentConfig};
pub use dataset::{DatasetError, DatasetItem};
pub use error::{BenchError, ExitCode};
pub use experiment::{run_experiment, RunSummary, Workspace};
pub use store::{CacheStats, ChunkStore, StoreError};
pub use weights_io::{load_weights, save_weights, WeightsError};
