//! Entity-aware encoder-decoder with three-way encoding fusion.

mod model;
mod scorer;
mod train;

pub use model::{
    entity_stream, generation_loss, hierarchical_type_loss, total_loss, BlockSources, BlockState,
    BlockTrace, DecoderBlock, FusionConfig, FusionInput, FusionModel, FusionState, GenExample,
    LossNodes, LossParts, LossWeights, SelfTerm,
};
pub use scorer::{score_next_token, FusionScorer};
pub use train::{
    dialogue_examples, train_generator, EntitySource, FoldReport, GenEpoch, GenTrainConfig,
    GenTrainReport, GeneratorTraining, StageConfig, StageReport,
};
