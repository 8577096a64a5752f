//! Noise-prediction network, guidance wrapper, and score-matching training.

mod denoiser;
mod mlp;
mod optim;
mod train;

pub use denoiser::{CfgConfig, Condition, Denoiser, DenoiserConfig, EpsGrads, GradSink, Guided};
pub use mlp::{Activation, Dense, Mlp, Tape};
pub use optim::{AdamConfig, AdamW};
pub use train::{
    batch_loss_grad, score_matching_loss, train_score_matching, BatchGrad, TrainConfig, TrainItem,
    TrainReport,
};
