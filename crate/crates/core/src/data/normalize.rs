//! Winsorisation and min-max scaling fitted on the training split.

use serde::{Deserialize, Serialize};

use super::{Dataset, TokenArray};

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub p05: f64,
    pub p95: f64,
    /// Range of the winsorised training values.
    pub min: f64,
    pub max: f64,
    pub count: usize,
    /// Zero-width range or fewer than two observations; such features map to 0.
    pub constant: bool,
}

impl FeatureStats {
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return FeatureStats {
                p05: 0.0,
                p95: 0.0,
                min: 0.0,
                max: 0.0,
                count: 0,
                constant: true,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let p05 = quantile(&sorted, 0.05);
        let p95 = quantile(&sorted, 0.95);
        let clamped = sorted.iter().map(|v| v.clamp(p05, p95));
        let min = clamped.clone().fold(f64::INFINITY, f64::min);
        let max = clamped.fold(f64::NEG_INFINITY, f64::max);
        FeatureStats {
            p05,
            p95,
            min,
            max,
            count: values.len(),
            constant: values.len() < 2 || max <= min,
        }
    }

    pub fn winsorize(&self, v: f64) -> f64 {
        v.clamp(self.p05, self.p95)
    }

    pub fn normalize(&self, v: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (self.winsorize(v) - self.min) / (self.max - self.min)
        }
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        if self.constant {
            self.min
        } else {
            self.min + x * (self.max - self.min)
        }
    }

    /// Winsorised value range used to scale regression errors.
    pub fn range(&self) -> f64 {
        self.p95 - self.p05
    }
}

/// Per-feature statistics over every slot of that feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub stats: Vec<FeatureStats>,
}

impl Normalizer {
    /// Fits on the recorded values of the `train` samples only.
    pub fn fit(dataset: &Dataset, train: &[usize]) -> Self {
        let feature_of = dataset.layout.feature_of_slot();
        let mut per_feature = vec![Vec::new(); dataset.layout.features.len()];
        for &i in train {
            let s = &dataset.samples[i];
            for (slot, &f) in feature_of.iter().enumerate() {
                if s.observed[slot] {
                    per_feature[f].push(s.values[slot]);
                }
            }
        }
        Normalizer {
            stats: per_feature.iter().map(|v| FeatureStats::fit(v)).collect(),
        }
    }

    pub fn apply_sample(&self, feature_of: &[usize], sample: &mut TokenArray) {
        for (slot, &f) in feature_of.iter().enumerate() {
            if sample.observed[slot] {
                sample.values[slot] = self.stats[f].normalize(sample.values[slot]);
            }
        }
    }

    pub fn apply(&self, dataset: &mut Dataset) {
        let feature_of = dataset.layout.feature_of_slot();
        for s in &mut dataset.samples {
            self.apply_sample(&feature_of, s);
        }
    }

    pub fn constant_features(&self) -> Vec<usize> {
        (0..self.stats.len()).filter(|&f| self.stats[f].constant).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantiles_of_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = FeatureStats::fit(&v);
        assert!((s.p05 - 5.95).abs() < 1e-12);
        assert!((s.p95 - 95.05).abs() < 1e-12);
        assert!((s.winsorize(100.0) - 95.05).abs() < 1e-12);
        assert_eq!(s.winsorize(50.0), 50.0);
        assert_eq!(s.normalize(s.min), 0.0);
        assert_eq!(s.normalize(s.max), 1.0);
        assert!((s.normalize((s.min + s.max) / 2.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_and_degenerate_features() {
        let s = FeatureStats::fit(&[4.0; 10]);
        assert_eq!((s.p05, s.p95), (4.0, 4.0));
        assert!(s.constant);
        assert_eq!(s.winsorize(100.0), 4.0);
        assert_eq!(s.normalize(4.0), 0.0);
        assert!(FeatureStats::fit(&[1.0]).constant);
        assert!(FeatureStats::fit(&[]).constant);
    }

    proptest! {
        #[test]
        fn round_trip_inside_range(
            mut v in prop::collection::vec(-1e3f64..1e3, 2..60),
            t in 0.0f64..1.0,
        ) {
            v.sort_by(f64::total_cmp);
            let s = FeatureStats::fit(&v);
            prop_assume!(!s.constant);
            let x = s.min + t * (s.max - s.min);
            prop_assert!((s.denormalize(s.normalize(x)) - x).abs() < 1e-12 * (1.0 + x.abs()));
            for &x in &v {
                let n = s.normalize(x);
                prop_assert!((0.0..=1.0).contains(&n));
            }
        }

        #[test]
        fn quantile_matches_sorted_oracle(v in prop::collection::vec(-1e3f64..1e3, 1..40), q in 0.0f64..=1.0) {
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let got = quantile(&sorted, q);
            // Independent form: weighted average of the two bracketing order statistics.
            let pos = q * (sorted.len() - 1) as f64;
            let (i, j) = (pos.floor() as usize, pos.ceil() as usize);
            let w = pos - i as f64;
            let want = (1.0 - w) * sorted[i] + w * sorted[j];
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }
}
