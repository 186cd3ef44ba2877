use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::events::TimeFormat;
use crate::data::synth::{SynthConfig, SYNTH_TASK};
use crate::data::variant::InputVariant;
use crate::data::SplitConfig;
use crate::eval::ProbeConfig;
use crate::masking::MaskPolicy;
use crate::model::ModelConfig;
use crate::trainer::{FinetuneConfig, PretrainConfig, Schedule};
use crate::{Error, Result};

/// Every setting of a run. Commands read the sections they need; unknown
/// keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub masking: MaskPolicy,
    pub schedule: Schedule,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}


#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Event CSV for `preprocess`.
    pub events: Option<PathBuf>,
    /// Stay label CSV for `preprocess`.
    pub labels: Option<PathBuf>,
    /// Feature registry JSON; the bundled MIMIC-IV registry when absent.
    pub registry: Option<PathBuf>,
    pub time_format: TimeFormat,
    pub split: SplitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_accum: usize,
    pub halve_lr_on_nan: bool,
    /// Epochs between checkpoint writes.
    pub checkpoint_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            batch_size: d.batch_size,
            weight_decay: d.weight_decay,
            grad_accum: d.grad_accum,
            halve_lr_on_nan: d.halve_lr_on_nan,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Downstream task (label name).
    pub task: String,
    /// Train and validation shares of the stratified task split.
    pub split_fractions: (f64, f64),
    pub probe: ProbeConfig,
    /// Extra masking ratios of the imputation sweep.
    pub ratios: Vec<f64>,
    /// Registry panels hidden in the imputation sweep.
    pub panels: Vec<String>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            task: SYNTH_TASK.into(),
            split_fractions: (0.64, 0.16),
            probe: ProbeConfig::default(),
            ratios: (0..=6).map(|k| k as f64 / 10.0).collect(),
            panels: Vec::new(),
            batch_size: 256,
        }
    }
}

/// Grid of masking policies crossed with input variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub policies: Vec<MaskPolicy>,
    pub variants: Vec<InputVariant>,
    /// Training-data percentage used by the per-cell probe.
    pub probe_fraction: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        let mut policies: Vec<MaskPolicy> = [0.125, 0.25, 0.5, 0.75]
            .into_iter()
            .map(|b| MaskPolicy { a: 0.0, b })
            .collect();
        for b in [0.25, 0.5] {
            for a in [-0.025, -0.0125, 0.0125, 0.025] {
                policies.push(MaskPolicy { a, b });
            }
        }
        AblationSection {
            policies,
            variants: InputVariant::ALL.to_vec(),
            probe_fraction: 100.0,
        }
    }
}

impl RunConfig {
    /// Reads a JSON config; the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            batch_size: self.pretrain.batch_size,
            schedule: self.schedule.clone(),
            weight_decay: self.pretrain.weight_decay,
            policy: self.masking,
            grad_accum: self.pretrain.grad_accum,
            halve_lr_on_nan: self.pretrain.halve_lr_on_nan,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}
