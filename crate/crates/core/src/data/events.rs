//! Raw event records and their CSV form.

use std::io::Read;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MINUTES_PER_DAY: i64 = 24 * 60;

/// How the `time` column is encoded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFormat {
    /// `YYYY-MM-DD HH:MM[:SS]` or with a `T` separator.
    #[default]
    Iso,
    /// Integer minutes since the source clock's epoch.
    EpochMinutes,
}

/// One measurement or infusion event; times are minutes on the source clock.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub subject_id: String,
    pub stay_id: String,
    pub feature_id: String,
    pub time: i64,
    pub value: f64,
    /// End of an infusion, when the source records one.
    pub end_time: Option<i64>,
}

#[derive(Debug, Deserialize)]
struct Row {
    subject_id: String,
    stay_id: String,
    feature_id: String,
    time: String,
    value: f64,
    #[serde(default)]
    end_time: Option<String>,
}

pub fn parse_time(s: &str, format: TimeFormat) -> Result<i64> {
    let s = s.trim();
    match format {
        TimeFormat::EpochMinutes => s
            .parse::<i64>()
            .map_err(|_| Error::Data(format!("bad epoch-minute timestamp {s:?}"))),
        TimeFormat::Iso => {
            const FORMATS: [&str; 4] = [
                "%Y-%m-%dT%H:%M:%S",
                "%Y-%m-%d %H:%M:%S",
                "%Y-%m-%dT%H:%M",
                "%Y-%m-%d %H:%M",
            ];
            FORMATS
                .iter()
                .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
                .map(|t| t.and_utc().timestamp().div_euclid(60))
                .ok_or_else(|| Error::Data(format!("bad ISO-8601 timestamp {s:?}")))
        }
    }
}

/// Reads an event CSV with header
/// `subject_id,stay_id,feature_id,time,value[,end_time]`.
pub fn read_events<R: Read>(reader: R, format: TimeFormat) -> Result<Vec<EventRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row?;
        if !row.value.is_finite() {
            return Err(Error::Data(format!("row {}: non-finite value", line + 1)));
        }
        let time = parse_time(&row.time, format)?;
        let end_time = match row.end_time.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(parse_time(s, format)?),
        };
        out.push(EventRecord {
            subject_id: row.subject_id,
            stay_id: row.stay_id,
            feature_id: row.feature_id,
            time,
            value: row.value,
            end_time,
        });
    }
    Ok(out)
}

pub fn read_events_file(path: &Path, format: TimeFormat) -> Result<Vec<EventRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_events(std::io::BufReader::new(f), format)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_time_formats() {
        let iso = parse_time("1970-01-02 01:30", TimeFormat::Iso).unwrap();
        assert_eq!(iso, MINUTES_PER_DAY + 90);
        assert_eq!(parse_time("1970-01-02T01:30:59", TimeFormat::Iso).unwrap(), iso);
        assert_eq!(parse_time("1530", TimeFormat::EpochMinutes).unwrap(), 1530);
        assert!(parse_time("yesterday", TimeFormat::Iso).is_err());
    }

    #[test]
    fn reads_csv_with_optional_end_time() {
        let text = "subject_id,stay_id,feature_id,time,value,end_time\n\
                    1,10,220645,2180-01-01 21:00,140,\n\
                    1,10,221906,2180-01-01 02:10,0.1,2180-01-01 04:40\n";
        let ev = read_events(text.as_bytes(), TimeFormat::Iso).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].end_time, None);
        assert_eq!(ev[1].end_time.unwrap() - ev[1].time, 150);
        let no_end = "subject_id,stay_id,feature_id,time,value\n1,10,x,60,1.5\n";
        let ev = read_events(no_end.as_bytes(), TimeFormat::EpochMinutes).unwrap();
        assert_eq!(ev[0].time, 60);
    }
}
