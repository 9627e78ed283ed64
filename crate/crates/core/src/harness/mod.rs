//! Synthetic data, training, evaluation and sweeps.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod scene;
pub mod train;

pub use ablate::{parse_grid, run_config, run_grid, write_ablation_csv, AblationGrid, AblationRow};
pub use config::TrainConfig;
pub use dataset::{read_dataset, write_dataset};
pub use eval::{average_precision, corloc, evaluate, nms, thread_pool, write_metrics_csv, Detection, Metrics};
pub use scene::{generate_dataset, generate_scene, GroundTruth, SceneSpec, SyntheticScene};
pub use train::{train, TrainResult};
