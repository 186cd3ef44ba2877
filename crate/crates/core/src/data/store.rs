//! On-disk dataset container and run manifests.
//!
//! Container layout (little-endian): 8-byte magic, `u32` format version,
//! `u64` length + JSON header (layout, split, normaliser, per-sample ids and
//! labels), then `u64` sample count, `u64` grid length and three columns:
//! values (`f64`), times (`f64`) and observed flags (`u8`), each row-major.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::normalize::Normalizer;
use super::split::Split;
use super::{Dataset, GridLayout, TokenArray};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"AIDMAEDS";
const FORMAT_VERSION: u32 = 1;
pub const PIPELINE_VERSION: &str = concat!("aidmae-", env!("CARGO_PKG_VERSION"));

/// A dataset ready for training: normalised samples plus the split and the
/// statistics used to normalise them.
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub dataset: Dataset,
    pub split: Split,
    pub normalizer: Option<Normalizer>,
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    subject_id: String,
    stay_id: String,
    day_index: u32,
    admit_time: i64,
    labels: BTreeMap<String, bool>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    layout: GridLayout,
    split: Split,
    normalizer: Option<Normalizer>,
    samples: Vec<SampleHeader>,
}

pub fn encode(p: &Processed) -> Result<Vec<u8>> {
    let header = Header {
        layout: p.dataset.layout.clone(),
        split: p.split.clone(),
        normalizer: p.normalizer.clone(),
        samples: p
            .dataset
            .samples
            .iter()
            .map(|s| SampleHeader {
                subject_id: s.subject_id.clone(),
                stay_id: s.stay_id.clone(),
                day_index: s.day_index,
                admit_time: s.admit_time,
                labels: s.labels.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n = p.dataset.samples.len();
    let l = p.dataset.grid_len();
    let mut out = Vec::with_capacity(32 + json.len() + n * l * 17);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(l as u64).to_le_bytes());
    for s in &p.dataset.samples {
        if s.len() != l {
            return Err(Error::Contract(format!("sample {} has length {}", s.stay_id, s.len())));
        }
    }
    for s in &p.dataset.samples {
        s.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    for s in &p.dataset.samples {
        s.times.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    for s in &p.dataset.samples {
        out.extend(s.observed.iter().map(|&o| o as u8));
    }
    Ok(out)
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Data("dataset file is truncated".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Processed> {
    let mut c = Cursor(bytes);
    if c.take(8)? != MAGIC {
        return Err(Error::Data("not an aidmae dataset file".into()));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported dataset format version {version}")));
    }
    let len = c.u64()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?)?;
    let n = c.u64()? as usize;
    let l = c.u64()? as usize;
    if n != header.samples.len() || l != header.layout.len() {
        return Err(Error::Data("dataset header and columns disagree".into()));
    }
    let values = c.f64s(n * l)?;
    let times = c.f64s(n * l)?;
    let observed = c.take(n * l)?;
    if !c.0.is_empty() {
        return Err(Error::Data("trailing bytes after dataset columns".into()));
    }
    let samples = header
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, h)| TokenArray {
            subject_id: h.subject_id,
            stay_id: h.stay_id,
            day_index: h.day_index,
            admit_time: h.admit_time,
            values: values[i * l..(i + 1) * l].to_vec(),
            times: times[i * l..(i + 1) * l].to_vec(),
            observed: observed[i * l..(i + 1) * l].iter().map(|&b| b != 0).collect(),
            labels: h.labels,
        })
        .collect();
    Ok(Processed {
        dataset: Dataset {
            layout: header.layout,
            samples,
        },
        split: header.split,
        normalizer: header.normalizer,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes `p` to `path` and returns the file hash.
pub fn save(path: &Path, p: &Processed) -> Result<String> {
    let bytes = encode(p)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<Processed> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Record of one run: what it read, what it wrote and with which settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub pipeline_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Input file name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the manifest) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        let config_hash = sha256_hex(config.to_string().as_bytes());
        Manifest {
            command: command.into(),
            pipeline_version: PIPELINE_VERSION.into(),
            seed,
            config,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::FILE);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    /// Reads the manifest in `dir`; a missing manifest is a data error.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Err(Error::Data(format!("missing manifest {}", path.display())));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that the recorded output `name` exists in `dir` with the
    /// recorded hash and returns its path.
    pub fn verified_output(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let want = self.outputs.get(name).ok_or_else(|| {
            Error::Data(format!("manifest in {} lists no output {name}", dir.display()))
        })?;
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Data(format!("missing artifact {}", path.display())));
        }
        let got = file_sha256(&path)?;
        if &got != want {
            return Err(Error::Data(format!(
                "{} hash {got} does not match manifest hash {want}",
                path.display()
            )));
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize::Normalizer;
    use crate::data::synth::{synth_generate, SynthConfig};

    fn processed() -> Processed {
        let dataset = synth_generate(&SynthConfig {
            num_samples: 30,
            num_features: 4,
            hourly_features: 1,
            ..Default::default()
        })
        .unwrap();
        let split = Split {
            train: (0..20).collect(),
            val: (20..25).collect(),
            test: (25..30).collect(),
        };
        let normalizer = Normalizer::fit(&dataset, &split.train);
        Processed {
            dataset,
            split,
            normalizer: Some(normalizer),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let p = processed();
        let bytes = encode(&p).unwrap();
        assert_eq!(decode(&bytes).unwrap(), p);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&processed()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_verifies_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = processed();
        let hash = save(&dir.path().join("data.bin"), &p).unwrap();
        let mut m = Manifest::new("test", 1, serde_json::json!({"a": 1}));
        m.outputs.insert("data.bin".into(), hash);
        m.save(dir.path()).unwrap();
        let m = Manifest::load(dir.path()).unwrap();
        assert!(m.verified_output(dir.path(), "data.bin").is_ok());
        std::fs::write(dir.path().join("data.bin"), b"tampered").unwrap();
        assert!(m.verified_output(dir.path(), "data.bin").is_err());
        assert!(Manifest::load(&dir.path().join("nowhere")).is_err());
    }
}
