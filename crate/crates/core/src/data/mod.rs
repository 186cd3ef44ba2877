//! Clinical event streams to fixed-grid token arrays.
//!
//! The grid has one slot per (feature, role): labs contribute a same-day slot
//! and a reference slot carrying the most recent prior-day result; vitals and
//! vasopressors contribute 24 hourly slots. Registry order fixes slot order.

pub mod dose;
pub mod events;
pub mod grid;
pub mod normalize;
pub mod registry;
pub mod split;
pub mod store;
pub mod synth;
pub mod variant;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::masking::IntrinsicMask;
use crate::Result;

use self::events::EventRecord;
use self::grid::{GridBuilder, GridStats};
use self::normalize::Normalizer;
use self::registry::FeatureRegistry;
use self::split::{split_dataset, Split};
use self::store::Processed;
use self::variant::{input_variant, InputVariant};

pub const HOURS_PER_DAY: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Lab,
    Vital,
    Vasopressor,
    /// Hourly norepinephrine-equivalent dose derived from all vasopressors.
    NeEquivalent,
}

impl FeatureKind {
    pub fn is_vasopressor(self) -> bool {
        matches!(self, FeatureKind::Vasopressor | FeatureKind::NeEquivalent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotRole {
    /// Last value within the calendar day.
    Daily,
    /// Most recent value recorded before the day started.
    Reference,
    /// Hour-of-day bin `[h, h+1)`.
    Hour(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub feature: usize,
    pub role: SlotRole,
}

/// Ordered slot layout of a token array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub features: Vec<FeatureInfo>,
    pub slots: Vec<Slot>,
}

impl GridLayout {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn feature_of_slot(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.feature).collect()
    }

    pub fn slots_of(&self, feature: usize) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.feature == feature)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// All slots of every feature in `panel`.
    pub fn panel_slots(&self, panel: &str) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| self.features[s.feature].panel.as_deref() == Some(panel))
            .map(|(i, _)| i)
            .collect()
    }

    /// Layout with one daily slot per feature, as produced by the synthetic
    /// generator for static tabular data.
    pub fn single_slot(features: Vec<FeatureInfo>) -> Self {
        let slots = (0..features.len())
            .map(|feature| Slot {
                feature,
                role: SlotRole::Daily,
            })
            .collect();
        GridLayout { features, slots }
    }
}

/// One patient-day sample on the grid.
///
/// `values`/`times` hold a placeholder `0.0` wherever `observed` is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenArray {
    pub subject_id: String,
    pub stay_id: String,
    pub day_index: u32,
    /// Admission time of the stay, minutes since the epoch of the source clock.
    pub admit_time: i64,
    pub values: Vec<f64>,
    pub times: Vec<f64>,
    pub observed: Vec<bool>,
    #[serde(default)]
    pub labels: BTreeMap<String, bool>,
}

impl TokenArray {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mask(&self) -> IntrinsicMask {
        IntrinsicMask::from_observed(&self.observed)
    }

    pub fn num_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Marks slot `i` as missing and clears its placeholders.
    pub fn hide(&mut self, i: usize) {
        self.observed[i] = false;
        self.values[i] = 0.0;
        self.times[i] = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub layout: GridLayout,
    pub samples: Vec<TokenArray>,
}

impl Dataset {
    pub fn grid_len(&self) -> usize {
        self.layout.len()
    }

    /// Indices of samples carrying a label for `task`.
    pub fn labeled(&self, task: &str) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.labels.contains_key(task))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Rounds an hour offset to one decimal place.
pub fn round_hours(h: f64) -> f64 {
    (h * 10.0).round() / 10.0
}

/// Stay-level binary outcomes keyed by stay id, then task name.
pub type StayLabels = BTreeMap<String, BTreeMap<String, bool>>;

/// Reads a label CSV with header `stay_id,task,label` (label 0/1).
pub fn read_labels<R: std::io::Read>(reader: R) -> Result<StayLabels> {
    #[derive(Deserialize)]
    struct Row {
        stay_id: String,
        task: String,
        label: u8,
    }
    let mut out = StayLabels::new();
    for row in csv::Reader::from_reader(reader).deserialize::<Row>() {
        let row = row?;
        if row.label > 1 {
            return Err(crate::Error::Data(format!(
                "label {} for stay {} is not binary",
                row.label, row.stay_id
            )));
        }
        out.entry(row.stay_id).or_default().insert(row.task, row.label == 1);
    }
    Ok(out)
}

/// Settings shared by every preprocessing route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Admissions at or after this time (minutes) form the test split.
    pub cut_time: Option<i64>,
    pub val_fraction: f64,
    pub variant: InputVariant,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            cut_time: None,
            val_fraction: 0.2,
            variant: InputVariant::Full,
        }
    }
}

/// Splits, fits normalisation on the training part, normalises everything and
/// applies the input variant.
pub fn finalize(mut dataset: Dataset, cut_time: i64, cfg: &SplitConfig, seed: u64) -> Result<Processed> {
    let split: Split = split_dataset(&dataset.samples, cut_time, cfg.val_fraction, seed)?;
    let normalizer = Normalizer::fit(&dataset, &split.train);
    normalizer.apply(&mut dataset);
    Ok(Processed {
        dataset: input_variant(&dataset, cfg.variant),
        split,
        normalizer: Some(normalizer),
    })
}

/// Full event-stream pipeline. Labels attach to the first retained day of
/// each stay, the sample used for early-admission prediction.
pub fn preprocess_events(
    registry: &FeatureRegistry,
    events: &[EventRecord],
    labels: &StayLabels,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<(Processed, GridStats)> {
    let builder = GridBuilder::new(registry)?;
    let (mut samples, stats) = builder.build(events)?;
    let mut seen = std::collections::HashSet::new();
    for s in &mut samples {
        if seen.insert(s.stay_id.clone()) {
            if let Some(l) = labels.get(&s.stay_id) {
                s.labels = l.clone();
            }
        }
    }
    if samples.is_empty() {
        return Err(crate::Error::Data("no daily rows with laboratory values".into()));
    }
    let cut = cfg
        .cut_time
        .ok_or_else(|| crate::Error::Config("event preprocessing needs split.cut_time".into()))?;
    let dataset = Dataset {
        layout: builder.layout().clone(),
        samples,
    };
    Ok((finalize(dataset, cut, cfg, seed)?, stats))
}
