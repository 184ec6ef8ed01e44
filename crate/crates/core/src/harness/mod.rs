//! Synthetic data, training, evaluation and the ablation grid.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod log;
pub mod model;
pub mod train;

pub use ablation::{run_ablation, standard_grid, AblationCell, AblationTable};
pub use config::{ModelConfig, PgMode};
pub use dataset::{generate_dataset, DatasetSpec, Instance, Split, SyntheticDataset};
pub use eval::{evaluate, EvalReport};
pub use log::{LogRecord, MetricLog};
pub use model::{Checkpoint, DataDims, Model};
pub use train::{train, train_with, TrainOptions, TrainOutcome};
