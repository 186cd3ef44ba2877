use log::info;

use super::RunConfig;
use crate::data::split::stratified_split;
use crate::data::store::Processed;
use crate::data::variant::{input_variant, InputVariant};
use crate::eval::{embeddings, linear_probe, single_value_reconstruction, ProbeConfig};
use crate::model::Model;
use crate::trainer::{labelled, Pretrainer};
use crate::Result;

/// Metrics of one (input variant, masking policy) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: InputVariant,
    pub a: f64,
    pub b: f64,
    pub epochs: usize,
    pub train_total: f64,
    pub val_total: Option<f64>,
    pub probe_auroc: f64,
    pub probe_auprc: f64,
    pub recon_nrmse: Option<f64>,
    pub recon_r2: Option<f64>,
}

impl AblationRow {
    pub const HEADER: [&'static str; 10] = [
        "variant",
        "a",
        "b",
        "epochs",
        "train_total",
        "val_total",
        "probe_auroc",
        "probe_auprc",
        "recon_nrmse",
        "recon_r2",
    ];

    pub fn cells(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        vec![
            self.variant.name().into(),
            self.a.to_string(),
            self.b.to_string(),
            self.epochs.to_string(),
            self.train_total.to_string(),
            opt(self.val_total),
            self.probe_auroc.to_string(),
            self.probe_auprc.to_string(),
            opt(self.recon_nrmse),
            opt(self.recon_r2),
        ]
    }
}

/// Pretrains one model per cell of `cfg.ablation` on variants of the
/// full-input dataset `base`, then probes its embeddings on `cfg.eval.task`
/// and scores single-value reconstruction on the test split.
pub(super) fn run_ablation(cfg: &RunConfig, base: &Processed) -> Result<Vec<AblationRow>> {
    let task = &cfg.eval.task;
    let probe_cfg = ProbeConfig {
        fractions: vec![cfg.ablation.probe_fraction],
        seeds: cfg.eval.probe.seeds.clone(),
        logistic: cfg.eval.probe.logistic,
    };
    let bs = cfg.eval.batch_size;
    let mut rows = Vec::new();
    for &variant in &cfg.ablation.variants {
        let data = input_variant(&base.dataset, variant);
        let task_split = stratified_split(&data.samples, task, cfg.eval.split_fractions, cfg.seed)?;
        let (train_s, train_y) = labelled(&data, &task_split.train, task, "training")?;
        let (test_s, test_y) = labelled(&data, &task_split.test, task, "test")?;
        let recon_idx: Vec<usize> = base
            .split
            .test
            .iter()
            .copied()
            .filter(|&i| data.samples[i].num_observed() > 0)
            .collect();
        for &policy in &cfg.ablation.policies {
            info!("ablation cell {} a={} b={}", variant.name(), policy.a, policy.b);
            let mut mc = cfg.model.clone();
            mc.grid_len = data.grid_len();
            let mut pcfg = cfg.pretrain_config();
            pcfg.policy = policy;
            let mut trainer = Pretrainer::new(Model::new(mc, cfg.seed)?, &data, &base.split, pcfg, cfg.seed)?;
            trainer.train(None)?;
            let state = &trainer.state;
            let model = state.best_model();
            let (_, summary) = linear_probe(
                &embeddings(&model, &train_s, bs)?,
                &train_y,
                &embeddings(&model, &test_s, bs)?,
                &test_y,
                &probe_cfg,
            )?;
            let recon = single_value_reconstruction(&model, &data, base.normalizer.as_ref(), &recon_idx, bs)?;
            let last = state.log.last();
            rows.push(AblationRow {
                variant,
                a: policy.a,
                b: policy.b,
                epochs: state.epoch,
                train_total: last.map_or(f64::NAN, |l| l.train.total),
                val_total: last.and_then(|l| l.val.map(|v| v.total)),
                probe_auroc: summary[0].auroc.mean,
                probe_auprc: summary[0].auprc.mean,
                recon_nrmse: recon.mean.map(|m| m.nrmse),
                recon_r2: recon.mean.map(|m| m.r2),
            });
        }
    }
    Ok(rows)
}
