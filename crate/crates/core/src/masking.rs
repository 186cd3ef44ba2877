//! Intrinsic and augmented masks, logit-proportional mask weights and
//! padded encoder batches.
//!
//! Index-set vocabulary used throughout: `R` recorded slots, `M` intrinsically
//! missing slots, `A ⊆ R` slots hidden by the augmented mask and `R \ A` the
//! kept slots that the encoder actually sees. `{R\A, A, M}` always partitions
//! the grid.

use aidmae_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenArray;
use crate::{Error, Result};

/// Which slots hold a recorded measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntrinsicMask {
    m: Vec<bool>,
    recorded: Vec<usize>,
    missing: Vec<usize>,
}

impl IntrinsicMask {
    pub fn from_observed(observed: &[bool]) -> Self {
        let (recorded, missing) = (0..observed.len()).partition(|&i| observed[i]);
        IntrinsicMask {
            m: observed.to_vec(),
            recorded,
            missing,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.m
    }

    /// `R`
    pub fn recorded(&self) -> &[usize] {
        &self.recorded
    }

    /// `M`
    pub fn missing(&self) -> &[usize] {
        &self.missing
    }
}

pub fn derive_intrinsic_mask(values: &[Option<f64>]) -> IntrinsicMask {
    let observed: Vec<bool> = values.iter().map(Option::is_some).collect();
    IntrinsicMask::from_observed(&observed)
}

/// Augmented mask over the recorded slots of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    keep: Vec<bool>,
    augmented: Vec<usize>,
    kept: Vec<usize>,
}

impl MaskPlan {
    /// Plan from per-slot keep flags; flags on missing slots are ignored.
    pub fn from_keep(mask: &IntrinsicMask, keep: &[bool]) -> Self {
        let (kept, augmented): (Vec<usize>, Vec<usize>) =
            mask.recorded().iter().partition(|&&i| keep[i]);
        let mut flags = vec![false; mask.len()];
        for &i in &kept {
            flags[i] = true;
        }
        MaskPlan {
            keep: flags,
            augmented,
            kept,
        }
    }

    /// No augmented masking: every recorded slot is kept.
    pub fn keep_all(mask: &IntrinsicMask) -> Self {
        Self::from_keep(mask, mask.bits())
    }

    /// `m'` restricted to recorded slots (false on `A` and on `M`).
    pub fn keep_bits(&self) -> &[bool] {
        &self.keep
    }

    /// `A`
    pub fn augmented(&self) -> &[usize] {
        &self.augmented
    }

    /// `R \ A`
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// Augmented-mask policy parameters: `a` sets the resampling direction, `b`
/// the base rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    pub a: f64,
    pub b: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { a: 0.0, b: 0.25 }
    }
}

impl MaskPolicy {
    pub fn weights(&self, p_miss: &[f64]) -> Result<Vec<f64>> {
        logit_weights(p_miss, self.a, self.b)
    }
}

/// Per-feature masking probability
/// `w_j = clamp(a * ln(p_j / (1 - p_j)) + b, 0, 1)`, and `0` when `p_j = 1`.
pub fn logit_weights(p_miss: &[f64], a: f64, b: f64) -> Result<Vec<f64>> {
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::Domain(format!("mask offset b={b} must lie in (0, 1)")));
    }
    p_miss
        .iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("missing rate {p} outside [0, 1]")));
            }
            if p == 1.0 {
                return Ok(0.0);
            }
            // a = 0 must give exactly b, including p = 0 where ln(0) = -inf
            let w = if a == 0.0 { b } else { a * (p / (1.0 - p)).ln() + b };
            Ok(if w.is_nan() { 0.0 } else { w.clamp(0.0, 1.0) })
        })
        .collect()
}

/// Per-feature fraction of missing slots over `samples`.
pub fn missing_rates<'a>(
    samples: impl IntoIterator<Item = &'a TokenArray>,
    feature_of_slot: &[usize],
    num_features: usize,
) -> Vec<f64> {
    let mut missing = vec![0usize; num_features];
    let mut total = vec![0usize; num_features];
    for s in samples {
        for (i, &f) in feature_of_slot.iter().enumerate() {
            total[f] += 1;
            if !s.observed[i] {
                missing[f] += 1;
            }
        }
    }
    missing
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 1.0 } else { m as f64 / t as f64 })
        .collect()
}

/// Expands per-feature weights to per-slot weights.
pub fn token_weights(feature_weights: &[f64], feature_of_slot: &[usize]) -> Vec<f64> {
    feature_of_slot.iter().map(|&f| feature_weights[f]).collect()
}

/// Hides each recorded slot `i` independently with probability `weights[i]`.
///
/// If every recorded slot ends up hidden the draw is repeated once; if that
/// also hides everything, the highest-weight slot (lowest index on ties) is
/// kept so the encoder never receives an empty sample.
pub fn sample_augmented_mask<R: Rng + ?Sized>(
    mask: &IntrinsicMask,
    weights: &[f64],
    rng: &mut R,
) -> MaskPlan {
    debug_assert_eq!(weights.len(), mask.len());
    let draw = |rng: &mut R| {
        let mut keep = vec![false; mask.len()];
        for &i in mask.recorded() {
            keep[i] = rng.random::<f64>() >= weights[i];
        }
        keep
    };
    let recorded = mask.recorded();
    let mut keep = draw(rng);
    if !recorded.is_empty() && recorded.iter().all(|&i| !keep[i]) {
        keep = draw(rng);
        if recorded.iter().all(|&i| !keep[i]) {
            let mut best = recorded[0];
            for &i in recorded {
                if weights[i] > weights[best] {
                    best = i;
                }
            }
            keep[best] = true;
        }
    }
    MaskPlan::from_keep(mask, &keep)
}

/// Where an encoder slot's content comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOrigin {
    Cls,
    Token(usize),
    Pad,
}

/// Encoder-side layout for a batch: slot 0 is CLS, then the kept tokens of each
/// sample in grid order, right-padded to the batch maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    /// Batch-maximum number of kept tokens (`ℓ_keep`), excluding CLS.
    pub ell_keep: usize,
    /// Kept-token count per sample.
    pub lengths: Vec<usize>,
    /// `[B][ell_keep + 1]` slot origins.
    pub origin: Vec<Vec<SlotOrigin>>,
    /// Attention mask `[B, S, S]` with `S = ell_keep + 1`; zero on every pad
    /// row and column.
    pub gamma: Tensor,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Encoder sequence length including the CLS slot.
    pub fn seq_len(&self) -> usize {
        self.ell_keep + 1
    }

    /// Encoder slot holding grid position `pos` of sample `b`, if kept.
    pub fn slot_of(&self, b: usize, pos: usize) -> Option<usize> {
        self.origin[b]
            .iter()
            .position(|o| *o == SlotOrigin::Token(pos))
    }
}

/// Lays out kept-token index lists (one per sample, grid order) into a padded
/// batch with its attention mask.
pub fn build_padded_batch(kept: &[&[usize]]) -> Result<PaddedBatch> {
    if kept.is_empty() {
        return Err(Error::Contract("cannot build an empty batch".into()));
    }
    if let Some(b) = kept.iter().position(|k| k.is_empty()) {
        return Err(Error::Contract(format!(
            "sample {b} has no kept tokens; lab-free rows must be discarded upstream"
        )));
    }
    let ell_keep = kept.iter().map(|k| k.len()).max().unwrap_or(0);
    let s = ell_keep + 1;
    let mut gamma = Tensor::zeros(&[kept.len(), s, s]);
    let mut origin = Vec::with_capacity(kept.len());
    for (b, k) in kept.iter().enumerate() {
        let mut row = Vec::with_capacity(s);
        row.push(SlotOrigin::Cls);
        row.extend(k.iter().map(|&i| SlotOrigin::Token(i)));
        row.resize(s, SlotOrigin::Pad);
        let real = k.len() + 1;
        let g = &mut gamma.data_mut()[b * s * s..(b + 1) * s * s];
        for i in 0..real {
            for j in 0..real {
                g[i * s + j] = 1.0;
            }
        }
        origin.push(row);
    }
    Ok(PaddedBatch {
        ell_keep,
        lengths: kept.iter().map(|k| k.len()).collect(),
        origin,
        gamma,
    })
}
