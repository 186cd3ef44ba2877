use std::collections::BTreeMap;

use aidmae_tensor::Tape;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::metrics::{regression_metrics, RegressionMetrics};
use crate::data::normalize::{quantile, Normalizer};
use crate::data::{Dataset, TokenArray};
use crate::masking::MaskPlan;
use crate::model::Model;
use crate::rng::{stream, Stream};
use crate::{Error, Result};

/// Classification logits without dropout.
pub fn predict_logits(model: &Model, samples: &[&TokenArray], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let tape = Tape::new();
        out.extend(model.classify(&tape, chunk, None)?.data().iter());
    }
    Ok(out)
}

/// CLS embeddings of `samples`, batched.
pub fn embeddings(model: &Model, samples: &[&TokenArray], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        out.extend(model.cls_embeddings(chunk)?);
    }
    Ok(out)
}

/// Reconstructions of each sample with only the slots flagged in `keep`
/// visible to the encoder.
pub fn reconstruct_visible(
    model: &Model,
    samples: &[&TokenArray],
    keep: &[Vec<bool>],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let l = model.config.grid_len;
    let mut out = Vec::with_capacity(samples.len());
    let bs = batch_size.max(1);
    for (chunk, keeps) in samples.chunks(bs).zip(keep.chunks(bs)) {
        let plans: Vec<MaskPlan> = chunk
            .iter()
            .zip(keeps)
            .map(|(s, k)| MaskPlan::from_keep(&s.mask(), k))
            .collect();
        let tape = Tape::new();
        let fwd = model.reconstruct(&tape, chunk, &plans)?;
        let data = fwd.recon.data();
        out.extend(data.chunks(l).map(<[f64]>::to_vec));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecon {
    pub feature: String,
    pub count: usize,
    pub metrics: Option<RegressionMetrics>,
    /// Metrics on the original measurement scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<RegressionMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Reconstruction quality per feature and averaged over features with
/// defined metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub per_feature: Vec<FeatureRecon>,
    pub mean: Option<RegressionMetrics>,
    pub evaluated: usize,
    pub skipped: usize,
}

/// One reconstruction job: which slots the encoder sees and which are scored.
struct Job {
    sample: usize,
    keep: Vec<bool>,
    score: Vec<usize>,
}

struct Ctx<'a> {
    model: &'a Model,
    data: &'a Dataset,
    normalizer: Option<&'a Normalizer>,
    batch_size: usize,
}

fn scored(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics> {
    value_range(truth).and_then(|r| regression_metrics(pred, truth, r))
}

fn run_jobs(ctx: &Ctx, jobs: &[Job], skipped: usize) -> Result<ReconReport> {
    let (model, data) = (ctx.model, ctx.data);
    let samples: Vec<&TokenArray> = jobs.iter().map(|j| &data.samples[j.sample]).collect();
    let keeps: Vec<Vec<bool>> = jobs.iter().map(|j| j.keep.clone()).collect();
    let preds = reconstruct_visible(model, &samples, &keeps, ctx.batch_size)?;
    let feature_of = data.layout.feature_of_slot();
    let mut pairs: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (job, pred) in jobs.iter().zip(&preds) {
        let s = &data.samples[job.sample];
        for &i in &job.score {
            let e = pairs.entry(feature_of[i]).or_default();
            e.0.push(pred[i]);
            e.1.push(s.values[i]);
        }
    }
    let mut per_feature = Vec::new();
    let mut defined = Vec::new();
    for (f, (pred, truth)) in pairs {
        let name = data.layout.features[f].name.clone();
        let result = scored(&pred, &truth);
        let raw = ctx.normalizer.and_then(|n| {
            let st = &n.stats[f];
            let p: Vec<f64> = pred.iter().map(|&x| st.denormalize(x)).collect();
            let t: Vec<f64> = truth.iter().map(|&x| st.denormalize(x)).collect();
            scored(&p, &t).ok()
        });
        let (metrics, note) = match result {
            Ok(m) => {
                defined.push(m);
                (Some(m), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        per_feature.push(FeatureRecon {
            feature: name,
            count: truth.len(),
            metrics,
            raw,
            note,
        });
    }
    let mean = (!defined.is_empty()).then(|| {
        let n = defined.len() as f64;
        RegressionMetrics {
            nrmse: defined.iter().map(|m| m.nrmse).sum::<f64>() / n,
            nmae: defined.iter().map(|m| m.nmae).sum::<f64>() / n,
            r2: defined.iter().map(|m| m.r2).sum::<f64>() / n,
        }
    });
    Ok(ReconReport {
        per_feature,
        mean,
        evaluated: jobs.len(),
        skipped,
    })
}

/// Winsorised (5th to 95th percentile) range of the true values, falling back
/// to the full range when that is degenerate.
pub fn value_range(truth: &[f64]) -> Result<f64> {
    let mut v = truth.to_vec();
    v.sort_by(f64::total_cmp);
    if v.len() < 2 {
        return Err(Error::UndefinedMetric("fewer than two values".into()));
    }
    let r = quantile(&v, 0.95) - quantile(&v, 0.05);
    let full = v[v.len() - 1] - v[0];
    if r > 0.0 {
        Ok(r)
    } else if full > 0.0 {
        Ok(full)
    } else {
        Err(Error::UndefinedMetric("constant values".into()))
    }
}

/// Hides each recorded feature of each sample in turn (all its slots) and
/// scores the reconstruction of the hidden values.
pub fn single_value_reconstruction(
    model: &Model,
    data: &Dataset,
    normalizer: Option<&Normalizer>,
    idx: &[usize],
    batch_size: usize,
) -> Result<ReconReport> {
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for &si in idx {
        let s = &data.samples[si];
        for f in 0..data.layout.features.len() {
            let slots: Vec<usize> = data
                .layout
                .slots_of(f)
                .into_iter()
                .filter(|&i| s.observed[i])
                .collect();
            if slots.is_empty() {
                continue;
            }
            let mut keep = s.observed.clone();
            slots.iter().for_each(|&i| keep[i] = false);
            if !keep.iter().any(|&k| k) {
                skipped += 1;
                continue;
            }
            jobs.push(Job {
                sample: si,
                keep,
                score: slots,
            });
        }
    }
    let ctx = Ctx {
        model,
        data,
        normalizer,
        batch_size,
    };
    run_jobs(&ctx, &jobs, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Hide every slot of every feature in the named panel; score those slots.
    Panel(String),
    /// Additionally hide each recorded slot with this probability; score all
    /// recorded slots.
    Random(f64),
}

impl SweepMode {
    pub fn label(&self) -> String {
        match self {
            SweepMode::Panel(p) => format!("panel:{p}"),
            SweepMode::Random(r) => format!("random:{r}"),
        }
    }
}

/// Reconstruction under injected extra masking on top of the intrinsic
/// missingness. Samples left with nothing visible are skipped and counted.
pub fn imputation_sweep(
    model: &Model,
    data: &Dataset,
    normalizer: Option<&Normalizer>,
    idx: &[usize],
    mode: &SweepMode,
    seed: u64,
    batch_size: usize,
) -> Result<ReconReport> {
    let mut jobs = Vec::new();
    let mut skipped = 0;
    match mode {
        SweepMode::Random(ratio) => {
            if !(0.0..1.0).contains(ratio) {
                return Err(Error::Config(format!("masking ratio {ratio} not in [0,1)")));
            }
            let mut rng = stream(seed, Stream::Eval, ratio.to_bits());
            for &si in idx {
                let s = &data.samples[si];
                let keep: Vec<bool> = s
                    .observed
                    .iter()
                    .map(|&o| o && rng.random::<f64>() >= *ratio)
                    .collect();
                let score: Vec<usize> = (0..s.len()).filter(|&i| s.observed[i]).collect();
                if score.is_empty() || !keep.iter().any(|&k| k) {
                    skipped += 1;
                    continue;
                }
                jobs.push(Job {
                    sample: si,
                    keep,
                    score,
                });
            }
        }
        SweepMode::Panel(panel) => {
            let slots = data.layout.panel_slots(panel);
            if slots.is_empty() {
                return Err(Error::Config(format!("no features in panel {panel:?}")));
            }
            for &si in idx {
                let s = &data.samples[si];
                let mut keep = s.observed.clone();
                slots.iter().for_each(|&i| keep[i] = false);
                let score: Vec<usize> = slots.iter().copied().filter(|&i| s.observed[i]).collect();
                if score.is_empty() {
                    continue;
                }
                if !keep.iter().any(|&k| k) {
                    skipped += 1;
                    continue;
                }
                jobs.push(Job {
                    sample: si,
                    keep,
                    score,
                });
            }
        }
    }
    let ctx = Ctx {
        model,
        data,
        normalizer,
        batch_size,
    };
    run_jobs(&ctx, &jobs, skipped)
}
