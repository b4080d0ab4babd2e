//! Losses, metrics, the training loop, checkpoints and unimodal pretraining.

pub mod checkpoint;
pub mod loss;
pub mod metrics;
pub mod pretrain;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::LossChoice;
pub use metrics::{compute_metrics, Metrics};
pub use pretrain::{pretrain_unimodal, PretrainOutcome, UnimodalModel};
pub use trainer::{evaluate, train_run, Classifier, EpochMetrics, TrainConfig, TrainReport};
