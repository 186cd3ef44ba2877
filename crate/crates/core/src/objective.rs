//! Dual reconstruction loss and the supervised binary loss.

use aidmae_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::TokenArray;
use crate::masking::{IntrinsicMask, MaskPlan};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SetCounts {
    pub kept: usize,
    pub augmented: usize,
    pub missing: usize,
}

/// Per-sample or batch-averaged reconstruction loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean squared error over the kept tokens `R \ A`.
    pub unmasked_term: f64,
    /// Mean squared error over the augmented-masked tokens `A`.
    pub masked_term: f64,
    pub total: f64,
    pub counts: SetCounts,
}

impl LossReport {
    /// Mean of the terms of several reports; counts are summed.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.unmasked_term += r.unmasked_term / n;
            out.masked_term += r.masked_term / n;
            out.total += r.total / n;
            out.counts.kept += r.counts.kept;
            out.counts.augmented += r.counts.augmented;
            out.counts.missing += r.counts.missing;
        }
        out
    }
}

fn mse(pred: &[f64], target: &[f64], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().map(|&i| (pred[i] - target[i]).powi(2)).sum::<f64>() / idx.len() as f64
}

/// Reconstruction loss of one sample; missing slots never contribute and an
/// empty `A` contributes zero.
pub fn dual_reconstruction_loss(
    pred: &[f64],
    target: &[f64],
    mask: &IntrinsicMask,
    plan: &MaskPlan,
) -> Result<LossReport> {
    let l = mask.len();
    if pred.len() != l || target.len() != l || plan.len() != l {
        return Err(Error::Contract(format!(
            "loss inputs of lengths {}, {}, {}, {} disagree",
            pred.len(),
            target.len(),
            l,
            plan.len()
        )));
    }
    let unmasked_term = mse(pred, target, plan.kept());
    let masked_term = mse(pred, target, plan.augmented());
    Ok(LossReport {
        unmasked_term,
        masked_term,
        total: unmasked_term + masked_term,
        counts: SetCounts {
            kept: plan.kept().len(),
            augmented: plan.augmented().len(),
            missing: mask.missing().len(),
        },
    })
}

/// Batch loss on the tape (mean of per-sample totals) together with the
/// per-sample reports.
pub fn batch_reconstruction_loss<'t>(
    tape: &'t Tape,
    recon: Var<'t>,
    samples: &[&TokenArray],
    plans: &[MaskPlan],
) -> Result<(Var<'t>, Vec<LossReport>)> {
    let shape = recon.shape();
    let (b, l) = (samples.len(), shape.last().copied().unwrap_or(0));
    if shape != [b, l] || plans.len() != b {
        return Err(Error::Contract(format!(
            "reconstruction {shape:?} does not match {b} samples"
        )));
    }
    let mut target = vec![0.0; b * l];
    let mut weight = vec![0.0; b * l];
    let mut reports = Vec::with_capacity(b);
    {
        let pred = recon.data();
        for (j, (s, plan)) in samples.iter().zip(plans).enumerate() {
            let row = j * l..(j + 1) * l;
            target[row.clone()].copy_from_slice(&s.values);
            reports.push(dual_reconstruction_loss(&pred[row], &s.values, &s.mask(), plan)?);
            for set in [plan.kept(), plan.augmented()] {
                for &i in set {
                    weight[j * l + i] = 1.0 / (b * set.len()) as f64;
                }
            }
        }
    }
    let diff = recon.sub(tape.constant(Tensor::new(vec![b, l], target)?))?;
    let loss = diff.mul(diff)?.mul_const(weight)?.sum();
    Ok((loss, reports))
}

/// Mean binary cross-entropy of logits against boolean labels.
pub fn bce_with_logits<'t>(logits: Var<'t>, labels: &[bool]) -> Result<Var<'t>> {
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    Ok(logits.bce_with_logits(&y)?)
}
