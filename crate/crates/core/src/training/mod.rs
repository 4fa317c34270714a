//! Losses, optimisation and the training loops.

mod gradcheck;
mod loss;
mod optim;
mod trainer;

pub use gradcheck::{model_gradient_check, GradientCheck};
pub use loss::{
    composite_loss, dice_loss, dice_loss_var, focal_loss, focal_loss_var, head_loss, LossConfig,
    LossReport, PROB_CLAMP,
};
pub use optim::{clip_grad_norm, global_norm, lr_at, optimizer_step, AdamW, AdamWConfig, Schedule};
pub use trainer::{
    evaluate_samples, feature_cache, finetune, pixel_head, pretrain, reconstruction_loss,
    EpochRecord, Evaluation, PretrainRecord, TrainConfig, TrainState,
};
