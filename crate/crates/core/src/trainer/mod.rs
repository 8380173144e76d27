//! Training: factored loss, parameter freezing, Adam, checkpoints and
//! checkpoint averaging.

mod average;
mod freeze;
mod loss;
mod optim;
mod train;

pub use average::{
    average_checkpoints, average_params, read_metrics, select_best, write_metrics, CheckpointRecord, METRICS_FILE,
};
pub use freeze::{freeze_params, glob_match, FreezePreset, FreezeSpec};
pub use loss::{compute_loss, nvs_target_matrix, Accuracy, LossConfig, LossMetrics};
pub use optim::{Adam, BETA1, BETA2, EPSILON};
pub use train::{
    evaluate, train, TrainConfig, TrainStart, TrainSummary, TrainedModel, AVERAGED_PARAMS, BEST_PARAMS, CONFIG_FILE,
};
