//! Experiment plumbing: data, configuration, training runs, checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod train;

pub use checkpoint::{load_model, save_model, Checkpoint};
pub use config::{ExperimentConfig, Mode, SEED_ENV};
pub use data::{holdout, load_idx, synth_dataset, write_idx, zsl_split, DataSource, Dataset, SynthConfig, ZslSplit};
pub use train::{balanced_batches, grid, grid_csv, train, GridRow, LogRow, TrainOutcome, SEEN, UNSEEN};
