//! Shared encoder, pretext heads and classifier; pre-training and
//! fine-tuning loops.

pub mod network;
pub mod spec;
pub mod train;

pub use network::{Encoder, Head, LossTerms, Objective, PimModel};
pub use spec::{
    build_heads, heads_for, EncoderSpec, HeadSpec, LossWeights, OutputNonlinearity, Task,
    TrainConfig,
};
pub use train::{
    evaluate_loss, finetune, init_classifier_model, predict, pretrain, pretrain_session,
    sample_few_shot, save_history, split_train_val, write_history_jsonl, EpochRecord,
    FinetuneOutcome, PerTerm, Prediction, PretrainOutcome, TrainSession,
};
