//! Configuration, training, evaluation and the ablation harness.

mod ablation;
mod config;
mod eval;
mod optim;
mod train;

pub use ablation::{
    preset_cells, run_ablation, AblationCell, AblationPreset, AblationRow, AblationTable,
};
pub use config::{
    config_key_help, config_keys, ConfigKey, DatasetEntry, EvalSection, OptimizerConfig,
    Precision, TrainConfig, TrainSection,
};
pub use eval::{
    compute_map, interpolated_ap, CategoryReport, DatasetReport, EvalReport, GroundTruth,
    MapResult, Prediction, PredictionRecord, RunMetadata, COCO_IOU_THRESHOLDS, RECALL_POINTS,
};
pub use optim::{AdamW, LrSchedule};
pub use train::{
    eval_prompt_entry, evaluate_checkpoint, evaluate_dataset, load_datasets, read_metrics,
    union_categories, write_predictions, CheckpointManifest, MetricsRecord, PromptEntry,
    TrainSummary, Trainer, CHECKPOINT_FORMAT_VERSION, MANIFEST_FILE, METRICS_FILE,
    OPTIMIZER_FILE, WEIGHTS_FILE,
};
