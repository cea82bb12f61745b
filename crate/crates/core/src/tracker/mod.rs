//! Desk-scale RGB-thermal tracker built around the fusion modules.

pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use config::{FusionMode, PipelineConfig, TrainConfig};
pub use data::{generate_dataset, BBox, DataConfig, Regime, TrackSample};
pub use model::{Ainet, Batch, ForwardTrace, HeadOutput, Targets};
pub use train::{ablation, datasets, evaluate, evaluate_run, median, run_demo, train, AblationRun, Evaluation, MetricRow, TrainReport};
