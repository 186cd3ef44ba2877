//! Subject-disjoint train/validation/test splits.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TokenArray;
use crate::rng::{stream, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn subjects<'a>(&self, samples: &'a [TokenArray], part: &[usize]) -> BTreeSet<&'a str> {
        part.iter().map(|&i| samples[i].subject_id.as_str()).collect()
    }
}

/// Splits by admission time: subjects first admitted before `cut_time` go to
/// train/validation (with `val_fraction` of those subjects held out), the rest
/// to test. A subject whose stays straddle the cut stays wholly on the earlier
/// side.
pub fn split_dataset(
    samples: &[TokenArray],
    cut_time: i64,
    val_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} not in [0,1)")));
    }
    let mut first_admit: BTreeMap<&str, (i64, i64)> = BTreeMap::new();
    for s in samples {
        let e = first_admit
            .entry(s.subject_id.as_str())
            .or_insert((s.admit_time, s.admit_time));
        e.0 = e.0.min(s.admit_time);
        e.1 = e.1.max(s.admit_time);
    }
    let mut early = Vec::new();
    let mut test_subjects = BTreeSet::new();
    for (&subject, &(first, last)) in &first_admit {
        if first < cut_time {
            if last >= cut_time {
                warn!("subject {subject} spans the split cut; kept on the training side");
            }
            early.push(subject);
        } else {
            test_subjects.insert(subject);
        }
    }
    if test_subjects.is_empty() {
        warn!("every subject is admitted before the cut; the test split is empty");
    }
    early.shuffle(&mut stream(seed, Stream::Split, 0));
    let n_val = (early.len() as f64 * val_fraction).round() as usize;
    let val_subjects: BTreeSet<&str> = early[..n_val].iter().copied().collect();

    let mut split = Split::default();
    for (i, s) in samples.iter().enumerate() {
        let id = s.subject_id.as_str();
        if test_subjects.contains(id) {
            split.test.push(i);
        } else if val_subjects.contains(id) {
            split.val.push(i);
        } else {
            split.train.push(i);
        }
    }
    Ok(split)
}

/// Subject-level split of the samples labelled for `task`, stratified by the
/// label of each subject's first sample. `fractions` are the train and
/// validation shares; the rest is test.
pub fn stratified_split(
    samples: &[TokenArray],
    task: &str,
    fractions: (f64, f64),
    seed: u64,
) -> Result<Split> {
    let (f_train, f_val) = fractions;
    if f_train <= 0.0 || f_val < 0.0 || f_train + f_val > 1.0 {
        return Err(Error::Config(format!("bad split fractions {fractions:?}")));
    }
    let mut subject_label: BTreeMap<&str, bool> = BTreeMap::new();
    for s in samples {
        if let Some(&y) = s.labels.get(task) {
            subject_label.entry(s.subject_id.as_str()).or_insert(y);
        }
    }
    let mut rng = stream(seed, Stream::Split, 1);
    let mut part_of: BTreeMap<&str, u8> = BTreeMap::new();
    for class in [false, true] {
        let mut subjects: Vec<&str> = subject_label
            .iter()
            .filter(|(_, &y)| y == class)
            .map(|(&s, _)| s)
            .collect();
        subjects.shuffle(&mut rng);
        let n = subjects.len() as f64;
        let n_train = (n * f_train).round() as usize;
        let n_val = ((n * (f_train + f_val)).round() as usize).max(n_train) - n_train;
        for (k, s) in subjects.into_iter().enumerate() {
            let part = if k < n_train {
                0
            } else if k < n_train + n_val {
                1
            } else {
                2
            };
            part_of.insert(s, part);
        }
    }
    let mut split = Split::default();
    for (i, s) in samples.iter().enumerate() {
        if !s.labels.contains_key(task) {
            continue;
        }
        match part_of[s.subject_id.as_str()] {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(subject: &str, admit: i64) -> TokenArray {
        TokenArray {
            subject_id: subject.into(),
            stay_id: format!("{subject}-{admit}"),
            day_index: 0,
            admit_time: admit,
            values: vec![],
            times: vec![],
            observed: vec![],
            labels: Default::default(),
        }
    }

    #[test]
    fn all_before_cut_gives_empty_test() {
        let s: Vec<_> = (0..10).map(|i| sample(&i.to_string(), i)).collect();
        let split = split_dataset(&s, 100, 0.2, 0).unwrap();
        assert!(split.test.is_empty());
        assert_eq!(split.val.len(), 2);
        assert_eq!(split.train.len(), 8);
    }

    #[test]
    fn stratified_split_keeps_prevalence() {
        let s: Vec<_> = (0..1000)
            .map(|i| {
                let mut t = sample(&i.to_string(), i);
                t.labels.insert("y".into(), i % 5 == 0);
                t
            })
            .collect();
        let split = stratified_split(&s, "y", (0.64, 0.16), 3).unwrap();
        assert_eq!(split.train.len(), 640);
        assert_eq!(split.val.len(), 160);
        assert_eq!(split.test.len(), 200);
        for part in [&split.train, &split.val, &split.test] {
            let pos = part.iter().filter(|&&i| s[i].labels["y"]).count();
            assert_eq!(pos * 5, part.len());
        }
    }

    #[test]
    fn subject_stays_together() {
        let s = vec![sample("a", 1), sample("a", 50), sample("a", 200), sample("b", 300)];
        let split = split_dataset(&s, 100, 0.0, 0).unwrap();
        assert_eq!(split.train, vec![0, 1, 2]);
        assert_eq!(split.test, vec![3]);
    }

    proptest! {
        #[test]
        fn splits_are_subject_disjoint(
            rows in prop::collection::vec((0u8..12, 0i64..200), 1..80),
            cut in 0i64..200,
            frac in 0.0f64..0.9,
            seed in 0u64..1000,
        ) {
            let s: Vec<_> = rows.iter().map(|(subj, t)| sample(&subj.to_string(), *t)).collect();
            let split = split_dataset(&s, cut, frac, seed).unwrap();
            let tr = split.subjects(&s, &split.train);
            let va = split.subjects(&s, &split.val);
            let te = split.subjects(&s, &split.test);
            prop_assert!(tr.is_disjoint(&va));
            prop_assert!(tr.is_disjoint(&te));
            prop_assert!(va.is_disjoint(&te));
            prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), s.len());
        }
    }
}
