//! Optimizers, early stopping, the staged transfer pipeline, ensemble
//! inference and cross-validation.

mod early_stop;
mod fit;
mod optim;
mod pipeline;
mod record;

pub use early_stop::{EarlyStopping, Verdict};
pub use fit::{accumulate_batch, fit, mean_loss, validation_split, EpochRecord, History, TrainItem, VALIDATION_FRACTION};
pub use optim::{sgd_step, OptConfig, OptMode, OptState};
pub use pipeline::{
    attribute_items,
    crop_sample, cross_validate, ensemble_predict, evaluate, make_folds, predict_box, run_pipeline,
    train_downstream, train_pretext, train_segment_net, transfer_init, CropRecord, FoldSplit, PipelineOutput, Predictor,
    Stages, TrainPlan, DEFAULT_CROP_OFFSET,
};
pub use record::RunManifest;
