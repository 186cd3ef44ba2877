use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::logistic::{LogisticConfig, LogisticRegression};
use super::metrics::{auprc, auroc, MeanSd};
use crate::data::TokenArray;
use crate::rng::{stream, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Percentages of the training data.
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub logistic: LogisticConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            fractions: vec![1.0, 5.0, 10.0, 50.0, 100.0],
            seeds: (2020..=2024).collect(),
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub fraction: f64,
    pub auroc: MeanSd,
    pub auprc: MeanSd,
}

/// Class-stratified subsample holding `percent` of each class (at least one).
pub fn stratified_subsample(labels: &[bool], percent: f64, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, Stream::Probe, percent.to_bits());
    let mut out = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * percent / 100.0).round() as usize).clamp(1, idx.len().max(1));
        out.extend(idx.into_iter().take(k));
    }
    out.sort_unstable();
    out
}

/// Logistic probes on fixed features for every (fraction, seed) pair,
/// always scored on the same test set.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[bool],
    test_x: &[Vec<f64>],
    test_y: &[bool],
    cfg: &ProbeConfig,
) -> Result<(Vec<ProbeRow>, Vec<ProbeSummary>)> {
    if let Some(f) = cfg.fractions.iter().find(|f| !(**f > 0.0 && **f <= 100.0)) {
        return Err(Error::Config(format!("probe fraction {f}% not in (0, 100]")));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &fraction in &cfg.fractions {
        let (mut a, mut p) = (Vec::new(), Vec::new());
        for &seed in &cfg.seeds {
            let idx = stratified_subsample(train_y, fraction, seed);
            let x: Vec<Vec<f64>> = idx.iter().map(|&i| train_x[i].clone()).collect();
            let y: Vec<bool> = idx.iter().map(|&i| train_y[i]).collect();
            let model = LogisticRegression::fit(&x, &y, &cfg.logistic)?;
            let scores: Vec<f64> = test_x.iter().map(|r| model.decision(r)).collect();
            let row = ProbeRow {
                fraction,
                seed,
                n_train: idx.len(),
                auroc: auroc(&scores, test_y)?,
                auprc: auprc(&scores, test_y)?,
                converged: model.converged,
            };
            a.push(row.auroc);
            p.push(row.auprc);
            rows.push(row);
        }
        summary.push(ProbeSummary {
            fraction,
            auroc: MeanSd::of(&a),
            auprc: MeanSd::of(&p),
        });
    }
    Ok((rows, summary))
}

/// Per-slot medians of recorded training values.
pub fn fit_medians(samples: &[&TokenArray]) -> Vec<f64> {
    let l = samples.first().map_or(0, |s| s.len());
    (0..l)
        .map(|i| {
            let mut v: Vec<f64> = samples
                .iter()
                .filter(|s| s.observed[i])
                .map(|s| s.values[i])
                .collect();
            if v.is_empty() {
                return 0.0;
            }
            v.sort_by(f64::total_cmp);
            super::super::data::normalize::quantile(&v, 0.5)
        })
        .collect()
}

/// Raw grid values with unrecorded slots replaced by `medians`.
pub fn median_imputed(samples: &[&TokenArray], medians: &[f64]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|i| if s.observed[i] { s.values[i] } else { medians[i] })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_is_stratified_and_seeded() {
        let y: Vec<bool> = (0..1000).map(|i| i % 4 == 0).collect();
        let idx = stratified_subsample(&y, 10.0, 2020);
        assert_eq!(idx.len(), 100);
        assert_eq!(idx.iter().filter(|&&i| y[i]).count(), 25);
        assert_eq!(idx, stratified_subsample(&y, 10.0, 2020));
        assert_ne!(idx, stratified_subsample(&y, 10.0, 2021));
        assert_eq!(stratified_subsample(&y, 100.0, 1).len(), 1000);
    }

    #[test]
    fn probe_emits_one_row_per_fraction_and_seed() {
        let x: Vec<Vec<f64>> = (0..400).map(|i| vec![(i % 20) as f64 / 10.0 - 1.0]).collect();
        let y: Vec<bool> = x.iter().map(|r| r[0] > 0.0).collect();
        let cfg = ProbeConfig::default();
        let (rows, summary) = linear_probe(&x, &y, &x, &y, &cfg).unwrap();
        assert_eq!(rows.len(), 25);
        assert_eq!(summary.len(), 5);
        assert!(rows.iter().all(|r| r.auroc == 1.0));
    }
}
