//! Optimisation loops: masked-autoencoder pretraining and supervised
//! fine-tuning.

mod finetune;
mod optim;
mod pretrain;

pub use finetune::{finetune, labelled, FinetuneConfig, FinetuneEpoch, FinetuneReport};
pub use optim::{cosine_lr, AdamW, Hyper, Schedule};
pub use pretrain::{write_log_csv, Checkpoint, EpochLog, PretrainConfig, Pretrainer};
