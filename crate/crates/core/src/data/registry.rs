//! Feature catalogue: which source items map to which grid feature.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dose::Drug;
use super::{FeatureInfo, FeatureKind, GridLayout, Slot, SlotRole, HOURS_PER_DAY};
use crate::{Error, Result};

/// Bundled MIMIC-IV catalogue.
pub const MIMIC_IV_REGISTRY: &str = include_str!("../../data/mimic_iv_registry.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Source item identifiers mapped onto this feature.
    #[serde(default)]
    pub item_ids: Vec<String>,
    /// Item identifiers recorded in degrees Fahrenheit.
    #[serde(default)]
    pub fahrenheit_ids: Vec<String>,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub panel: Option<String>,
    /// Vasopressor identity, used for the NE-equivalent dose.
    #[serde(default)]
    pub drug: Option<Drug>,
    /// Whether the feature occupies grid slots; input-only drugs feed the
    /// NE-equivalent channel without their own slots.
    #[serde(default = "yes")]
    pub on_grid: bool,
}

fn yes() -> bool {
    true
}

/// Where a source item lands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemRoute {
    /// Index into `FeatureRegistry::features`.
    pub spec: usize,
    pub fahrenheit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRegistry {
    pub features: Vec<FeatureSpec>,
}

impl FeatureRegistry {
    pub fn from_json(text: &str) -> Result<Self> {
        let reg: FeatureRegistry = serde_json::from_str(text)?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn mimic_iv() -> Self {
        Self::from_json(MIMIC_IV_REGISTRY).expect("bundled registry is valid")
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, f) in self.features.iter().enumerate() {
            if seen.insert(f.name.as_str(), i).is_some() {
                return Err(Error::Config(format!("duplicate feature name {}", f.name)));
            }
            if f.kind == FeatureKind::Vasopressor && f.drug.is_none() {
                return Err(Error::Config(format!("vasopressor {} names no drug", f.name)));
            }
            if !f.on_grid && f.kind != FeatureKind::Vasopressor {
                return Err(Error::Config(format!(
                    "only vasopressors may be input-only, not {}",
                    f.name
                )));
            }
        }
        let neq = self
            .features
            .iter()
            .filter(|f| f.kind == FeatureKind::NeEquivalent)
            .count();
        if neq > 1 {
            return Err(Error::Config("more than one NE-equivalent channel".into()));
        }
        self.routes().map(|_| ())
    }

    /// Item identifier to feature routing table.
    pub fn routes(&self) -> Result<HashMap<String, ItemRoute>> {
        let mut out = HashMap::new();
        for (spec, f) in self.features.iter().enumerate() {
            for id in f.item_ids.iter().chain(&f.fahrenheit_ids) {
                let route = ItemRoute {
                    spec,
                    fahrenheit: f.fahrenheit_ids.contains(id),
                };
                if out.insert(id.clone(), route).is_some() {
                    return Err(Error::Config(format!("item id {id} listed twice")));
                }
            }
        }
        Ok(out)
    }

    /// Registry entries that occupy grid slots, in grid order.
    pub fn grid_features(&self) -> impl Iterator<Item = (usize, &FeatureSpec)> {
        self.features.iter().enumerate().filter(|(_, f)| f.on_grid)
    }

    /// Grid layout: labs take a daily and a reference slot, every other kind
    /// takes one slot per hour.
    pub fn layout(&self) -> GridLayout {
        let mut features = Vec::new();
        let mut slots = Vec::new();
        for (_, spec) in self.grid_features() {
            let feature = features.len();
            features.push(FeatureInfo {
                name: spec.name.clone(),
                kind: spec.kind,
                panel: spec.panel.clone(),
            });
            match spec.kind {
                FeatureKind::Lab => {
                    slots.push(Slot {
                        feature,
                        role: SlotRole::Daily,
                    });
                    slots.push(Slot {
                        feature,
                        role: SlotRole::Reference,
                    });
                }
                _ => slots.extend((0..HOURS_PER_DAY as u8).map(|h| Slot {
                    feature,
                    role: SlotRole::Hour(h),
                })),
            }
        }
        GridLayout { features, slots }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("registry serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_registry_layout() {
        let reg = FeatureRegistry::mimic_iv();
        let layout = reg.layout();
        let count = |k: FeatureKind| reg.grid_features().filter(|(_, f)| f.kind == k).count();
        let labs = count(FeatureKind::Lab);
        let hourly = count(FeatureKind::Vital)
            + count(FeatureKind::Vasopressor)
            + count(FeatureKind::NeEquivalent);
        assert_eq!(count(FeatureKind::Vital), 6);
        assert_eq!(count(FeatureKind::Vasopressor), 4);
        assert_eq!(count(FeatureKind::NeEquivalent), 1);
        assert_eq!(layout.len(), labs * 2 + hourly * 24);
        let vaso_slots = layout
            .slots
            .iter()
            .filter(|s| layout.features[s.feature].kind.is_vasopressor())
            .count();
        assert_eq!(vaso_slots, 120);
        let dopamine = reg.features.iter().find(|f| f.drug == Some(Drug::Dopamine)).unwrap();
        assert!(!dopamine.on_grid);
        let routes = reg.routes().unwrap();
        assert!(routes["223761"].fahrenheit);
        assert!(!routes["223762"].fahrenheit);
        assert_eq!(routes["223761"].spec, routes["223762"].spec);
        assert!(!layout.panel_slots("bmp").is_empty());
    }

    #[test]
    fn rejects_duplicates() {
        let text = r#"{"features":[
            {"name":"a","kind":"lab","item_ids":["1"]},
            {"name":"b","kind":"lab","item_ids":["1"]}]}"#;
        assert!(matches!(FeatureRegistry::from_json(text), Err(Error::Config(_))));
        let unknown = r#"{"features":[{"name":"a","kind":"lab","colour":"red"}]}"#;
        assert!(FeatureRegistry::from_json(unknown).is_err());
    }
}
