//! Data, training, evaluation and export workflows.

pub mod alloc;
pub mod analysis;
pub mod data;
pub mod gradsuite;
pub mod off;
pub mod synthetic;
pub mod train;

pub use alloc::tune_allocator;
pub use analysis::{density_sweep, export_sdw, run_ablation, DensityRow, SdwRow, DENSITY_POINTS};
pub use data::DataSource;
pub use synthetic::{synth_dataset, ShapeClass, SyntheticOptions};
pub use train::{eval_seed, CHECKPOINT_FILE, METRICS_FILE, overfit_batch, EpochRecord, Model, RunRecord, TrainOptions, Trainer};
