//! Event streams to daily grid rows.

use std::collections::{BTreeMap, HashMap};

use log::{debug, warn};
use serde::Serialize;

use super::dose::{ne_equivalent, Drug, VasopressorRates};
use super::events::{EventRecord, MINUTES_PER_DAY};
use super::registry::{FeatureRegistry, ItemRoute};
use super::{round_hours, FeatureKind, GridLayout, SlotRole, TokenArray, HOURS_PER_DAY};
use crate::{Error, Result};

/// Infusion at a constant rate over `[start, end)` minutes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Infusion {
    pub start: i64,
    pub end: i64,
    pub rate: f64,
}

/// Counters for records dropped while building a grid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GridStats {
    pub unknown_items: usize,
    pub quarantined: usize,
    pub overlaps_resolved: usize,
    pub days_without_labs: usize,
    pub days_kept: usize,
}

/// Turns raw infusion events of one drug into non-overlapping intervals.
///
/// Events without an end run until the drug's next event or, failing that,
/// to the end of their calendar day. When intervals overlap the later one
/// wins; the return value counts how many were truncated.
pub fn resolve_infusions(events: &[(i64, Option<i64>, f64)]) -> (Vec<Infusion>, usize) {
    let mut ev = events.to_vec();
    ev.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.total_cmp(&b.2)));
    let mut out: Vec<Infusion> = Vec::with_capacity(ev.len());
    let mut overlaps = 0;
    for (i, &(start, end, rate)) in ev.iter().enumerate() {
        let end = end.unwrap_or_else(|| match ev.get(i + 1) {
            Some(next) => next.0,
            None => (start.div_euclid(MINUTES_PER_DAY) + 1) * MINUTES_PER_DAY,
        });
        if let Some(prev) = out.last_mut() {
            if prev.end > start {
                prev.end = start;
                overlaps += 1;
            }
        }
        if end > start {
            out.push(Infusion { start, end, rate });
        }
    }
    out.retain(|iv| iv.end > iv.start);
    (out, overlaps)
}

/// Rate of the latest-starting infusion that overlaps `[from, to)`.
fn rate_in(infusions: &[Infusion], from: i64, to: i64) -> Option<f64> {
    infusions
        .iter().rfind(|iv| iv.start < to && iv.end > from)
        .map(|iv| iv.rate)
}

/// Hours between `time` and the midnight ending the day, at 0.1 h resolution.
fn hours_before(midnight: i64, time: i64) -> f64 {
    round_hours((midnight - time) as f64 / 60.0)
}

/// Builds token arrays from one registry.
pub struct GridBuilder<'r> {
    registry: &'r FeatureRegistry,
    layout: GridLayout,
    routes: HashMap<String, ItemRoute>,
    /// Grid feature index per registry entry (`None` for input-only entries).
    grid_index: Vec<Option<usize>>,
    slot_of: HashMap<(usize, SlotRole), usize>,
}

impl<'r> GridBuilder<'r> {
    pub fn new(registry: &'r FeatureRegistry) -> Result<Self> {
        let layout = registry.layout();
        let mut grid_index = vec![None; registry.features.len()];
        for (g, (spec, _)) in registry.grid_features().enumerate() {
            grid_index[spec] = Some(g);
        }
        let slot_of = layout
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.feature, s.role), i))
            .collect();
        Ok(GridBuilder {
            registry,
            layout,
            routes: registry.routes()?,
            grid_index,
            slot_of,
        })
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    /// Daily rows of every stay in `events`, ordered by stay then day.
    pub fn build(&self, events: &[EventRecord]) -> Result<(Vec<TokenArray>, GridStats)> {
        let mut stays: BTreeMap<(&str, &str), Vec<&EventRecord>> = BTreeMap::new();
        for e in events {
            stays
                .entry((e.subject_id.as_str(), e.stay_id.as_str()))
                .or_default()
                .push(e);
        }
        let mut stats = GridStats::default();
        let mut out = Vec::new();
        for stay in stays.values() {
            out.extend(self.build_stay(stay, &mut stats)?);
        }
        Ok((out, stats))
    }

    /// Daily rows of a single stay; rows without any same-day lab are dropped.
    pub fn build_stay(
        &self,
        events: &[&EventRecord],
        stats: &mut GridStats,
    ) -> Result<Vec<TokenArray>> {
        let Some(first) = events.first() else {
            return Ok(Vec::new());
        };
        if events
            .iter()
            .any(|e| e.subject_id != first.subject_id || e.stay_id != first.stay_id)
        {
            return Err(Error::Contract("build_stay received several stays".into()));
        }
        let n_spec = self.registry.features.len();
        let mut series: Vec<Vec<(i64, f64)>> = vec![Vec::new(); n_spec];
        let mut infusions: Vec<Vec<(i64, Option<i64>, f64)>> = vec![Vec::new(); n_spec];
        for e in events {
            let Some(route) = self.routes.get(&e.feature_id) else {
                stats.unknown_items += 1;
                continue;
            };
            let spec = &self.registry.features[route.spec];
            if spec.kind == FeatureKind::Vasopressor {
                if e.value < 0.0 || !e.value.is_finite() {
                    warn!(
                        "stay {}: quarantined {} rate {} at {}",
                        e.stay_id, spec.name, e.value, e.time
                    );
                    stats.quarantined += 1;
                    continue;
                }
                infusions[route.spec].push((e.time, e.end_time, e.value));
            } else {
                let v = if route.fahrenheit {
                    (e.value - 32.0) * 5.0 / 9.0
                } else {
                    e.value
                };
                series[route.spec].push((e.time, v));
            }
        }
        for s in &mut series {
            s.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        }
        let mut resolved: Vec<Vec<Infusion>> = Vec::with_capacity(n_spec);
        for (spec, inf) in infusions.iter().enumerate() {
            let (iv, overlaps) = resolve_infusions(inf);
            if overlaps > 0 {
                debug!(
                    "stay {}: {} overlapping {} intervals truncated",
                    first.stay_id, overlaps, self.registry.features[spec].name
                );
            }
            stats.overlaps_resolved += overlaps;
            resolved.push(iv);
        }

        let admit_time = events.iter().map(|e| e.time).min().unwrap_or(0);
        let last_time = events.iter().map(|e| e.time).max().unwrap_or(0);
        let first_day = admit_time.div_euclid(MINUTES_PER_DAY);
        let last_day = last_time.div_euclid(MINUTES_PER_DAY);
        let l = self.layout.len();
        let mut out = Vec::new();
        for day in first_day..=last_day {
            let start = day * MINUTES_PER_DAY;
            let midnight = start + MINUTES_PER_DAY;
            let mut row = TokenArray {
                subject_id: first.subject_id.clone(),
                stay_id: first.stay_id.clone(),
                day_index: (day - first_day) as u32,
                admit_time,
                values: vec![0.0; l],
                times: vec![0.0; l],
                observed: vec![false; l],
                labels: BTreeMap::new(),
            };
            let mut set = |g: usize, role: SlotRole, value: f64, t: f64| {
                let i = self.slot_of[&(g, role)];
                row.values[i] = value;
                row.times[i] = t;
                row.observed[i] = true;
            };
            let mut has_lab = false;
            let mut hourly_rates = vec![VasopressorRates::default(); HOURS_PER_DAY];
            for (spec_idx, spec) in self.registry.features.iter().enumerate() {
                let g = self.grid_index[spec_idx];
                match spec.kind {
                    FeatureKind::Lab => {
                        let g = g.expect("labs are on the grid");
                        let s = &series[spec_idx];
                        let today = s.iter().rev().find(|p| p.0 >= start && p.0 < midnight);
                        if let Some(&(t, v)) = today {
                            set(g, SlotRole::Daily, v, hours_before(midnight, t));
                            has_lab = true;
                        }
                        if let Some(&(t, v)) = s.iter().rev().find(|p| p.0 < start) {
                            set(g, SlotRole::Reference, v, hours_before(midnight, t));
                        }
                    }
                    FeatureKind::Vital => {
                        let g = g.expect("vitals are on the grid");
                        for h in 0..HOURS_PER_DAY {
                            let (from, to) = (start + 60 * h as i64, start + 60 * (h as i64 + 1));
                            let s = &series[spec_idx];
                            if let Some(&(t, v)) = s.iter().rev().find(|p| p.0 >= from && p.0 < to) {
                                set(g, SlotRole::Hour(h as u8), v, hours_before(midnight, t));
                            }
                        }
                    }
                    FeatureKind::Vasopressor => {
                        let drug: Drug = spec.drug.expect("validated");
                        for (h, rates) in hourly_rates.iter_mut().enumerate() {
                            let (from, to) = (start + 60 * h as i64, start + 60 * (h as i64 + 1));
                            let Some(rate) = rate_in(&resolved[spec_idx], from, to) else {
                                continue;
                            };
                            rates.set(drug, Some(rates.get(drug).unwrap_or(0.0) + rate));
                            if let Some(g) = g {
                                set(g, SlotRole::Hour(h as u8), rate, midpoint_hours(h));
                            }
                        }
                    }
                    FeatureKind::NeEquivalent => {}
                }
            }
            if let Some((neq_idx, _)) = self
                .registry
                .features
                .iter()
                .enumerate()
                .find(|(_, f)| f.kind == FeatureKind::NeEquivalent)
            {
                let g = self.grid_index[neq_idx].expect("NE-equivalent is on the grid");
                for (h, rates) in hourly_rates.iter().enumerate() {
                    if let Some(v) = ne_equivalent(rates)? {
                        set(g, SlotRole::Hour(h as u8), v, midpoint_hours(h));
                    }
                }
            }
            if has_lab {
                stats.days_kept += 1;
                out.push(row);
            } else {
                stats.days_without_labs += 1;
            }
        }
        Ok(out)
    }
}

/// Timestamp of a carried-forward hourly value: the middle of hour `h`,
/// expressed in hours before midnight.
pub fn midpoint_hours(h: usize) -> f64 {
    HOURS_PER_DAY as f64 - (h as f64 + 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::events::{parse_time, TimeFormat};

    fn ev(feature: &str, time: &str, value: f64, end: Option<&str>) -> EventRecord {
        EventRecord {
            subject_id: "s1".into(),
            stay_id: "st1".into(),
            feature_id: feature.into(),
            time: parse_time(time, TimeFormat::Iso).unwrap(),
            value,
            end_time: end.map(|e| parse_time(e, TimeFormat::Iso).unwrap()),
        }
    }

    fn registry() -> FeatureRegistry {
        FeatureRegistry::from_json(
            r#"{"features":[
              {"name":"sodium","kind":"lab","item_ids":["na"]},
              {"name":"hr","kind":"vital","item_ids":["hr"]},
              {"name":"temp","kind":"vital","item_ids":["tc"],"fahrenheit_ids":["tf"]},
              {"name":"ne","kind":"vasopressor","item_ids":["ne"],"drug":"norepinephrine"},
              {"name":"dop","kind":"vasopressor","item_ids":["dop"],"drug":"dopamine","on_grid":false},
              {"name":"neq","kind":"ne_equivalent"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn lab_timestamps_and_reference() {
        let reg = registry();
        let b = GridBuilder::new(&reg).unwrap();
        let events = vec![
            ev("na", "2180-01-01 20:30", 138.0, None),
            ev("na", "2180-01-02 21:00", 140.0, None),
        ];
        let (rows, stats) = b.build(&events).unwrap();
        assert_eq!(rows.len(), 2);
        let day2 = &rows[1];
        assert_eq!(day2.day_index, 1);
        assert!(day2.observed[0]);
        assert_eq!(day2.values[0], 140.0);
        assert_eq!(day2.times[0], 3.0);
        assert!(day2.observed[1]);
        assert_eq!(day2.values[1], 138.0);
        assert_eq!(day2.times[1], 27.5);
        assert!(!rows[0].observed[1]);
        assert_eq!(stats.days_kept, 2);
    }

    #[test]
    fn days_without_labs_are_discarded() {
        let reg = registry();
        let b = GridBuilder::new(&reg).unwrap();
        let events = vec![
            ev("na", "2180-01-01 08:00", 138.0, None),
            ev("hr", "2180-01-02 09:15", 80.0, None),
        ];
        let (rows, stats) = b.build(&events).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].day_index, 0);
        assert_eq!(stats.days_without_labs, 1);
    }

    #[test]
    fn vitals_take_last_value_in_hour_and_convert_fahrenheit() {
        let reg = registry();
        let b = GridBuilder::new(&reg).unwrap();
        let layout = b.layout().clone();
        let events = vec![
            ev("na", "2180-01-01 08:00", 138.0, None),
            ev("hr", "2180-01-01 09:10", 80.0, None),
            ev("hr", "2180-01-01 09:50", 90.0, None),
            ev("tf", "2180-01-01 10:00", 98.6, None),
        ];
        let (rows, _) = b.build(&events).unwrap();
        let hr = layout.feature_index("hr").unwrap();
        let slot = layout.slots_of(hr)[9];
        assert_eq!(rows[0].values[slot], 90.0);
        assert_eq!(rows[0].times[slot], round_hours(14.0 + 10.0 / 60.0));
        assert!(!rows[0].observed[layout.slots_of(hr)[8]]);
        let temp = layout.slots_of(layout.feature_index("temp").unwrap())[10];
        assert!((rows[0].values[temp] - 37.0).abs() < 1e-12);
    }

    #[test]
    fn infusion_fills_overlapped_hours() {
        let reg = registry();
        let b = GridBuilder::new(&reg).unwrap();
        let layout = b.layout().clone();
        let events = vec![
            ev("na", "2180-01-01 08:00", 138.0, None),
            ev("ne", "2180-01-01 02:10", 0.1, Some("2180-01-01 04:40")),
            ev("dop", "2180-01-01 03:00", 15.0, Some("2180-01-01 04:00")),
        ];
        let (rows, _) = b.build(&events).unwrap();
        let ne = layout.slots_of(layout.feature_index("ne").unwrap());
        let neq = layout.slots_of(layout.feature_index("neq").unwrap());
        let filled: Vec<usize> = (0..24).filter(|&h| rows[0].observed[ne[h]]).collect();
        assert_eq!(filled, vec![2, 3, 4]);
        assert_eq!(rows[0].times[ne[3]], 20.5);
        assert_eq!(rows[0].values[ne[4]], 0.1);
        assert!((rows[0].values[neq[3]] - 0.2).abs() < 1e-15);
        assert!((rows[0].values[neq[2]] - 0.1).abs() < 1e-15);
        assert!(!rows[0].observed[neq[5]]);
    }

    #[test]
    fn open_infusions_run_to_next_event_or_midnight() {
        let day = MINUTES_PER_DAY;
        let (iv, overlaps) = resolve_infusions(&[(100, None, 1.0), (50, None, 2.0)]);
        assert_eq!(overlaps, 0);
        assert_eq!(iv[0], Infusion { start: 50, end: 100, rate: 2.0 });
        assert_eq!(iv[1], Infusion { start: 100, end: day, rate: 1.0 });
        let (iv, overlaps) = resolve_infusions(&[(0, Some(200), 1.0), (100, Some(300), 2.0)]);
        assert_eq!(overlaps, 1);
        assert_eq!(iv[0].end, 100);
        assert_eq!(iv[1].rate, 2.0);
    }

    #[test]
    fn negative_doses_are_quarantined() {
        let reg = registry();
        let b = GridBuilder::new(&reg).unwrap();
        let events = vec![
            ev("na", "2180-01-01 08:00", 138.0, None),
            ev("ne", "2180-01-01 02:10", -0.1, None),
            ev("unknown", "2180-01-01 02:10", 1.0, None),
        ];
        let (rows, stats) = b.build(&events).unwrap();
        assert_eq!(stats.quarantined, 1);
        assert_eq!(stats.unknown_items, 1);
        assert_eq!(rows[0].num_observed(), 1);
    }

    #[test]
    fn grid_is_deterministic_under_event_order() {
        let reg = registry();
        let b = GridBuilder::new(&reg).unwrap();
        let mut events = vec![
            ev("na", "2180-01-01 08:00", 138.0, None),
            ev("hr", "2180-01-01 09:10", 80.0, None),
            ev("ne", "2180-01-01 02:10", 0.1, None),
        ];
        let (a, _) = b.build(&events).unwrap();
        events.reverse();
        let (c, _) = b.build(&events).unwrap();
        assert_eq!(a, c);
    }
}
