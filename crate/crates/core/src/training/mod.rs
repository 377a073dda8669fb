//! SGD training, the staged protocol, checkpoints and the synthetic
//! unit-order task.

mod checkpoint;
mod optimizer;
mod order_task;
mod schedule;
mod staged;
mod trainer;

pub use checkpoint::{
    load_checkpoint, load_optimizer, load_state, read_manifest, save_checkpoint, Manifest,
    CHECKPOINT_SCHEMA,
};
pub use optimizer::{sgd_step, sgd_update, OptimizerState, SgdConfig};
pub use order_task::{make_order_task, motif_units, order_task_network, Dataset, OrderTaskSpec};
pub use schedule::{TrainSchedule, SCHEDULE_PRESETS};
pub use staged::{staged_train, StagedConfig, StagedData, StagedOutcome};
pub use trainer::{
    accuracy, argmax_rows, predict, train_loop, EpochMetrics, MetricsSink, TrainOptions,
};
