//! Multi-label entity prediction and per-class threshold calibration.

mod model;
mod predictor;
mod threshold;
mod train;

pub use model::{EntityModel, EntityModelConfig, EntityScorer, ENTITY_BLOCKS};
pub use predictor::EntityPredictor;
pub use threshold::{
    apply_thresholds, class_f1_at, inverse_frequency_weights, multilabel_f1, search_thresholds,
    set_counts, weighted_bce_loss, Average, Counts, GridSpec, Prf, ThresholdSearch,
    ThresholdVector,
};
pub use train::{
    entity_examples, score_matrix, train_entity_predictor, tune_thresholds, EntityEpoch,
    EntityExample, EntityTrainConfig, EntityTrainReport, EntityTraining, ThresholdReport,
    ThresholdTuning,
};
