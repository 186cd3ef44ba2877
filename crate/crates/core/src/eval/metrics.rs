use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Contract(format!("metric inputs of lengths {a} and {b}")));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk tie groups in ascending score order, counting negatives below.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| labels[k]).count();
        let neg = group.len() - pos;
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Average precision: `Σ_k (R_k − R_{k−1}) P_k` over descending score
/// thresholds, tied scores forming a single threshold.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs a positive sample".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut new_tp = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            new_tp += labels[order[j]] as usize;
            j += 1;
        }
        tp += new_tp;
        seen += j - i;
        ap += new_tp as f64 / n_pos as f64 * (tp as f64 / seen as f64);
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub nrmse: f64,
    pub nmae: f64,
    pub r2: f64,
}

/// RMSE and MAE divided by `value_range`, and `R² = 1 − SS_res/SS_tot`.
pub fn regression_metrics(pred: &[f64], truth: &[f64], value_range: f64) -> Result<RegressionMetrics> {
    check_lengths(pred.len(), truth.len())?;
    if !(value_range > 0.0) {
        return Err(Error::Domain(format!("value range {value_range} must be positive")));
    }
    if truth.len() < 2 {
        return Err(Error::UndefinedMetric("R² needs at least two values".into()));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R² of a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let mae: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    Ok(RegressionMetrics {
        nrmse: (ss_res / n).sqrt() / value_range,
        nmae: mae / value_range,
        r2: 1.0 - ss_res / ss_tot,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd, n }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.sd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auroc(s: &[f64], y: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &y).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &y).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auprc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auprc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
        // Thresholds 0.8, 0.4, 0.35, 0.1: precision 1, 1/2, 2/3, 2/4 with
        // recall steps 1/2, 0, 1/2, 0.
        let ap = auprc(&[0.1, 0.4, 0.35, 0.8], &y).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!(auprc(&[0.1], &[false]).is_err());
    }

    #[test]
    fn regression_examples() {
        let t = [1.0, 2.0, 4.0, 5.0];
        let m = regression_metrics(&t, &t, 4.0).unwrap();
        assert_eq!((m.nrmse, m.nmae, m.r2), (0.0, 0.0, 1.0));
        let m = regression_metrics(&[3.0; 4], &t, 4.0).unwrap();
        assert_eq!(m.r2, 0.0);
        // residuals 1, -1, 0, 2: SS_res 6, SS_tot 10, MAE 1, RMSE sqrt(1.5)
        let m = regression_metrics(&[2.0, 1.0, 4.0, 7.0], &t, 2.0).unwrap();
        assert!((m.r2 - 0.4).abs() < 1e-15);
        assert!((m.nmae - 0.5).abs() < 1e-15);
        assert!((m.nrmse - 1.5f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(regression_metrics(&[1.0, 1.0], &[2.0, 2.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_and_is_rank_invariant(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..50)
        ) {
            let s: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let y: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
            let a = auroc(&s, &y).unwrap();
            prop_assert_eq!(a, brute_auroc(&s, &y));
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&t, &y).unwrap(), a);
        }

        #[test]
        fn r2_is_one_only_for_exact_predictions(
            t in prop::collection::vec(-10.0f64..10.0, 2..30),
            k in 0usize..30, d in 0.001f64..1.0,
        ) {
            prop_assume!(t.iter().any(|&v| v != t[0]));
            let mut p = t.clone();
            let m = regression_metrics(&p, &t, 1.0).unwrap();
            prop_assert_eq!(m.r2, 1.0);
            let i = k % p.len();
            p[i] += d;
            let m = regression_metrics(&p, &t, 1.0).unwrap();
            prop_assert!(m.r2 < 1.0 && m.nrmse > 0.0 && m.nmae > 0.0);
        }
    }
}
