use std::path::Path;

use aidmae_tensor::{ParamStore, Tape};
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, AdamW, Schedule};
use crate::data::split::Split;
use crate::data::store::write_atomic;
use crate::data::{Dataset, TokenArray};
use crate::masking::{missing_rates, sample_augmented_mask, token_weights, MaskPlan, MaskPolicy};
use crate::model::{Model, ParamGroup};
use crate::objective::{batch_reconstruction_loss, LossReport};
use crate::rng::{stream, Rng, RngState, Stream};
use crate::{Error, Result};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub policy: MaskPolicy,
    /// Batches whose gradients are averaged into one update.
    pub grad_accum: usize,
    /// Halve the learning rate after an update skipped for non-finite
    /// gradients.
    pub halve_lr_on_nan: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 64,
            schedule: Schedule::default(),
            weight_decay: 0.05,
            policy: MaskPolicy::default(),
            grad_accum: 1,
            halve_lr_on_nan: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossReport,
    pub val: Option<LossReport>,
    pub skipped_updates: usize,
    pub fully_masked_rows: usize,
}

/// Everything needed to continue a pretraining run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config: PretrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub lr_scale: f64,
    pub mask_rng: RngState,
    pub shuffle_rng: RngState,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<ParamStore>,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c: Checkpoint = serde_json::from_str(&text)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", c.version)));
        }
        c.model.store.ensure_grad_buffers();
        Ok(c)
    }

    /// The model with the best validation weights, or the latest if none.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(p) = &self.best_params {
            m.store = p.clone();
        }
        m
    }
}

/// Writes the per-epoch log as CSV rows `epoch,split,lr,unmasked_term,masked_term,total`.
pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "split", "lr", "unmasked_term", "masked_term", "total"])?;
    for e in log {
        let rows = std::iter::once(("train", &e.train)).chain(e.val.as_ref().map(|v| ("val", v)));
        for (split, r) in rows {
            w.write_record([
                e.epoch.to_string(),
                split.to_string(),
                e.lr.to_string(),
                r.unmasked_term.to_string(),
                r.masked_term.to_string(),
                r.total.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Samples that can enter the encoder (at least one recorded token).
fn usable(data: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().copied().filter(|&i| data.samples[i].num_observed() > 0).collect()
}

/// Masked-autoencoder pretraining loop.
pub struct Pretrainer<'d> {
    data: &'d Dataset,
    train: Vec<usize>,
    val: Vec<usize>,
    weights: Vec<f64>,
    val_plans: Vec<MaskPlan>,
    mask_rng: Rng,
    shuffle_rng: Rng,
    pub state: Checkpoint,
}

impl<'d> Pretrainer<'d> {
    pub fn new(model: Model, data: &'d Dataset, split: &Split, config: PretrainConfig, seed: u64) -> Result<Self> {
        let optimizer = AdamW::new(&model.store);
        let mask_rng = stream(seed, Stream::Mask, 0);
        let shuffle_rng = stream(seed, Stream::Shuffle, 0);
        let state = Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            config,
            model,
            optimizer,
            epoch: 0,
            lr_scale: 1.0,
            mask_rng: RngState::capture(&mask_rng),
            shuffle_rng: RngState::capture(&shuffle_rng),
            best_val: None,
            best_epoch: None,
            best_params: None,
            log: Vec::new(),
        };
        Self::resume(state, data, split)
    }

    pub fn resume(mut state: Checkpoint, data: &'d Dataset, split: &Split) -> Result<Self> {
        let cfg = &state.config;
        if cfg.batch_size == 0 || cfg.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if data.grid_len() != state.model.config.grid_len {
            return Err(Error::Config(format!(
                "dataset grid length {} differs from model grid length {}",
                data.grid_len(),
                state.model.config.grid_len
            )));
        }
        let train = usable(data, &split.train);
        if train.is_empty() {
            return Err(Error::Data("training split has no usable samples".into()));
        }
        let val = usable(data, &split.val);
        let feature_of = data.layout.feature_of_slot();
        let p_miss = missing_rates(
            train.iter().map(|&i| &data.samples[i]),
            &feature_of,
            data.layout.features.len(),
        );
        let weights = token_weights(&cfg.policy.weights(&p_miss)?, &feature_of);
        let mut eval_rng = stream(state.seed, Stream::Eval, 0);
        let val_plans = val
            .iter()
            .map(|&i| sample_augmented_mask(&data.samples[i].mask(), &weights, &mut eval_rng))
            .collect();
        state.model.store.ensure_grad_buffers();
        state.model.set_trainable(ParamGroup::Encoder, true);
        state.model.set_trainable(ParamGroup::Decoder, true);
        state.model.set_trainable(ParamGroup::Head, false);
        Ok(Pretrainer {
            data,
            train,
            val,
            weights,
            val_plans,
            mask_rng: state.mask_rng.restore(),
            shuffle_rng: state.shuffle_rng.restore(),
            state,
        })
    }

    pub fn token_weights(&self) -> &[f64] {
        &self.weights
    }

    fn samples(&self, idx: &[usize]) -> Vec<&'d TokenArray> {
        idx.iter().map(|&i| &self.data.samples[i]).collect()
    }

    /// Loss of the current model on the validation split under its fixed masks.
    pub fn validation_loss(&self) -> Result<Option<LossReport>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut reports = Vec::with_capacity(self.val.len());
        let bs = self.state.config.batch_size;
        for (idx, plans) in self.val.chunks(bs).zip(self.val_plans.chunks(bs)) {
            let tape = Tape::new();
            let samples = self.samples(idx);
            let fwd = self.state.model.reconstruct(&tape, &samples, plans)?;
            let (_, r) = batch_reconstruction_loss(&tape, fwd.recon, &samples, plans)?;
            reports.extend(r);
        }
        Ok(Some(LossReport::mean(&reports)))
    }

    /// One pass over the training split with freshly drawn augmented masks.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let cfg = self.state.config.clone();
        let mut order = self.train.clone();
        order.shuffle(&mut self.shuffle_rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let nb = batches.len();
        let mut reports = Vec::with_capacity(order.len());
        let mut skipped = 0;
        let mut fully_masked = 0;
        let mut lr = 0.0;
        self.state.model.store.zero_grad();
        for (b, idx) in batches.iter().enumerate() {
            let samples = self.samples(idx);
            let plans: Vec<MaskPlan> = samples
                .iter()
                .map(|s| sample_augmented_mask(&s.mask(), &self.weights, &mut self.mask_rng))
                .collect();
            let tape = Tape::new();
            let fwd = self.state.model.reconstruct(&tape, &samples, &plans)?;
            let (loss, r) = batch_reconstruction_loss(&tape, fwd.recon, &samples, &plans)?;
            let value = loss.item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} batch {b}: loss {value}; kept tokens {}, masked {}",
                    r.iter().map(|x| x.counts.kept).sum::<usize>(),
                    r.iter().map(|x| x.counts.augmented).sum::<usize>()
                )));
            }
            reports.extend(r);
            fully_masked += tape.fully_masked_rows();
            tape.backward(loss)?.accumulate_into(&mut self.state.model.store);

            let window_end = (b + 1) % cfg.grad_accum == 0 || b + 1 == nb;
            if window_end {
                let k = (b % cfg.grad_accum + 1) as f64;
                if k > 1.0 {
                    for (_, p) in self.state.model.store.iter_mut() {
                        p.grad.iter_mut().for_each(|g| *g /= k);
                    }
                }
                lr = cosine_lr(epoch as f64 + (b + 1) as f64 / nb as f64, &cfg.schedule)
                    * self.state.lr_scale;
                let wd = cfg.weight_decay;
                if !self.state.optimizer.step(&mut self.state.model.store, |_| Some((lr, wd))) {
                    skipped += 1;
                    if cfg.halve_lr_on_nan {
                        self.state.lr_scale *= 0.5;
                    }
                }
                self.state.model.store.zero_grad();
            }
        }

        let val = self.validation_loss()?;
        let train = LossReport::mean(&reports);
        let score = val.as_ref().unwrap_or(&train).total;
        if self.state.best_val.is_none_or(|b| score < b) {
            self.state.best_val = Some(score);
            self.state.best_epoch = Some(epoch);
            self.state.best_params = Some(self.state.model.store.clone());
        }
        let log = EpochLog {
            epoch,
            lr,
            train,
            val,
            skipped_updates: skipped,
            fully_masked_rows: fully_masked,
        };
        info!(
            "epoch {epoch}: lr {lr:.3e} train {:.5} val {}",
            log.train.total,
            log.val.map_or("-".into(), |v| format!("{:.5}", v.total))
        );
        if skipped > 0 {
            warn!("epoch {epoch}: {skipped} updates skipped for non-finite gradients");
        }
        self.state.epoch += 1;
        self.state.mask_rng = RngState::capture(&self.mask_rng);
        self.state.shuffle_rng = RngState::capture(&self.shuffle_rng);
        self.state.log.push(log.clone());
        Ok(log)
    }

    /// Runs epochs until `until` (or the schedule's `max_epochs`) is reached.
    pub fn train(&mut self, until: Option<usize>) -> Result<&Checkpoint> {
        let end = until.unwrap_or(self.state.config.schedule.max_epochs);
        while self.state.epoch < end {
            self.run_epoch()?;
        }
        Ok(&self.state)
    }
}
