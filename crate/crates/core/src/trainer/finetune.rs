use aidmae_tensor::Tape;
use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::data::{Dataset, TokenArray};
use crate::eval::{auroc, predict_logits};
use crate::model::{Model, ParamGroup};
use crate::objective::bce_with_logits;
use crate::rng::{stream, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub enc_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Train only the classification head.
    pub freeze_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            enc_lr: 1e-5,
            head_lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            freeze_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub epochs_run: usize,
    pub history: Vec<FinetuneEpoch>,
}

/// Labelled samples of `task` among `idx` with their labels; both classes
/// must be present.
pub fn labelled<'d>(
    data: &'d Dataset,
    idx: &[usize],
    task: &str,
    what: &str,
) -> Result<(Vec<&'d TokenArray>, Vec<bool>)> {
    let (samples, labels): (Vec<_>, Vec<_>) = idx
        .iter()
        .map(|&i| &data.samples[i])
        .filter(|s| s.num_observed() > 0)
        .filter_map(|s| s.labels.get(task).map(|&y| (s, y)))
        .unzip();
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Data(format!(
            "{what} split has a single class for task {task} ({pos} of {} positive)",
            labels.len()
        )));
    }
    Ok((samples, labels))
}

/// Supervised training of the encoder and classification head with separate
/// learning rates and early stopping on validation AUROC. The model is left
/// at its best validation epoch.
pub fn finetune(
    model: &mut Model,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    task: &str,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let (train_s, train_y) = labelled(data, train, task, "training")?;
    let (val_s, val_y) = labelled(data, val, task, "validation")?;
    model.store.ensure_grad_buffers();
    model.set_trainable(ParamGroup::Encoder, !cfg.freeze_encoder);
    model.set_trainable(ParamGroup::Decoder, false);
    model.set_trainable(ParamGroup::Head, true);
    let mut opt = AdamW::new(&model.store);
    let mut shuffle_rng = stream(seed, Stream::Shuffle, 1);
    let mut dropout_rng = stream(seed, Stream::Dropout, 0);

    let mut best: Option<(usize, f64, aidmae_tensor::ParamStore)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_s.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let samples: Vec<&TokenArray> = idx.iter().map(|&i| train_s[i]).collect();
            let labels: Vec<bool> = idx.iter().map(|&i| train_y[i]).collect();
            let tape = Tape::new();
            let logits = model.classify(&tape, &samples, Some(&mut dropout_rng))?;
            let loss = bce_with_logits(logits, &labels)?;
            let value = loss.item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Diverged(format!("fine-tuning epoch {epoch}: loss {value}")));
            }
            total += value * idx.len() as f64;
            model.store.zero_grad();
            tape.backward(loss)?.accumulate_into(&mut model.store);
            let groups: Vec<ParamGroup> = model.store.iter().map(|(id, _)| model.group_of(id)).collect();
            opt.step(&mut model.store, |id| match groups[id.0] {
                ParamGroup::Encoder => Some((cfg.enc_lr, cfg.weight_decay)),
                ParamGroup::Head => Some((cfg.head_lr, cfg.weight_decay)),
                ParamGroup::Decoder => None,
            });
        }
        let scores = predict_logits(model, &val_s, cfg.batch_size)?;
        let val_auroc = auroc(&scores, &val_y)?;
        let train_loss = total / train_s.len() as f64;
        info!("finetune epoch {epoch}: loss {train_loss:.5} val AUROC {val_auroc:.4}");
        history.push(FinetuneEpoch {
            epoch,
            train_loss,
            val_auroc,
        });
        if best.as_ref().is_none_or(|b| val_auroc > b.1) {
            best = Some((epoch, val_auroc, model.store.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_val_auroc, store) = best.ok_or_else(|| Error::Config("max_epochs is 0".into()))?;
    model.store = store;
    Ok(FinetuneReport {
        best_epoch,
        best_val_auroc,
        epochs_run: history.len(),
        history,
    })
}
