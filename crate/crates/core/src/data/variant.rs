//! Input ablation variants.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::grid::midpoint_hours;
use super::{Dataset, GridLayout, Slot, SlotRole, TokenArray};
use crate::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    #[default]
    Full,
    /// Unrecorded vasopressor slots become recorded zeros.
    ZeroFillVasopressor,
    /// Hourly channels collapse to one daily slot holding the last value.
    #[serde(rename = "no_24h")]
    No24h,
}

impl InputVariant {
    pub const ALL: [InputVariant; 3] = [
        InputVariant::Full,
        InputVariant::ZeroFillVasopressor,
        InputVariant::No24h,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InputVariant::Full => "full",
            InputVariant::ZeroFillVasopressor => "zero_fill_vasopressor",
            InputVariant::No24h => "no_24h",
        }
    }
}

impl FromStr for InputVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        InputVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown input variant {s:?}")))
    }
}

/// Applies `variant` to a (normalised) dataset.
pub fn input_variant(dataset: &Dataset, variant: InputVariant) -> Dataset {
    match variant {
        InputVariant::Full => dataset.clone(),
        InputVariant::ZeroFillVasopressor => zero_fill(dataset),
        InputVariant::No24h => collapse_hourly(dataset),
    }
}

fn zero_fill(dataset: &Dataset) -> Dataset {
    let mut out = dataset.clone();
    let layout = &dataset.layout;
    for s in &mut out.samples {
        for (i, slot) in layout.slots.iter().enumerate() {
            if layout.features[slot.feature].kind.is_vasopressor() && !s.observed[i] {
                s.values[i] = 0.0;
                s.times[i] = match slot.role {
                    SlotRole::Hour(h) => midpoint_hours(h as usize),
                    _ => 0.0,
                };
                s.observed[i] = true;
            }
        }
    }
    out
}

fn collapse_hourly(dataset: &Dataset) -> Dataset {
    let layout = &dataset.layout;
    // For each new slot, the old slots it draws from (latest hour last).
    let mut sources: Vec<Vec<usize>> = Vec::new();
    let mut slots = Vec::new();
    for (i, slot) in layout.slots.iter().enumerate() {
        match slot.role {
            SlotRole::Hour(_) => {
                let existing = slots
                    .iter()
                    .position(|s: &Slot| s.feature == slot.feature && s.role == SlotRole::Daily);
                match existing {
                    Some(j) => sources[j].push(i),
                    None => {
                        slots.push(Slot {
                            feature: slot.feature,
                            role: SlotRole::Daily,
                        });
                        sources.push(vec![i]);
                    }
                }
            }
            _ => {
                slots.push(*slot);
                sources.push(vec![i]);
            }
        }
    }
    let new_layout = GridLayout {
        features: layout.features.clone(),
        slots,
    };
    let samples = dataset
        .samples
        .iter()
        .map(|s| {
            let mut t = TokenArray {
                values: vec![0.0; sources.len()],
                times: vec![0.0; sources.len()],
                observed: vec![false; sources.len()],
                ..s.clone()
            };
            for (j, src) in sources.iter().enumerate() {
                if let Some(&i) = src.iter().rev().find(|&&i| s.observed[i]) {
                    t.values[j] = s.values[i];
                    t.times[j] = s.times[i];
                    t.observed[j] = true;
                }
            }
            t
        })
        .collect();
    Dataset {
        layout: new_layout,
        samples,
    }
}
