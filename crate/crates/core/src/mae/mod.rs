//! A toy masked autoencoder trained by further pre-training and by
//! self-distillation, then fine-tuned with a classification head.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod params;
pub mod train;

pub use data::{Sequence, ToySequenceDataset, ToyTask, ToyTaskConfig};
pub use loss::{
    distill_loss, distill_loss_grad, mae_loss, mae_loss_grad, mars_kink_margin, sample_mask,
    MaskedBatch, Variant,
};
pub use params::{mars_norm, weight_distance, Mode, ModelDims, ToyModelParams, WeightNorm};
pub use train::{
    finetune, further_pretrain, initial_pretrain, run_pipelines, run_task, self_distill,
    FinetuneMetrics, PipelineReport, SelfDistillRun, StageReport, TrainConfig,
};
