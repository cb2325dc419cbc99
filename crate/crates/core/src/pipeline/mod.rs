//! Configuration, model assembly, training loop and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod train;

pub use self::checkpoint::{read_meta, Checkpoint, CheckpointMeta};
pub use self::config::{Algorithm, DataConfig, DataKind, OptimConfig, PipelineConfig, Precision, RunConfig, Schedule};
pub use self::export::{export_embeddings, read_embeddings, Embeddings};
pub use self::model::{batch_objective, head_losses, BatchItem, GradList, Head, LossValues, Model};
pub use self::optim::{learning_rate, Optimizer};
pub use self::sweep::{format_table, grid_configs, parse_grid, sweep, SweepRow};
pub use self::train::{
    base_sample, default_k, embed_split, evaluate_model, load_dataset, load_split, train, EpochRecord, StepRecord,
    TrainOutcome,
};
