//! Command-line runner behind the `aidmae` binary.
//!
//! Every command reads one JSON [`RunConfig`] (`--config`), applies its flag
//! overrides, and writes its artifacts plus a `manifest.json` recording the
//! resolved config and SHA-256 hashes of inputs and outputs. Downstream
//! commands refuse inputs whose hashes disagree with their manifests.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error,
//! 3 runtime failure.

mod ablation;
mod artifacts;
mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use ablation::AblationRow;
pub use artifacts::{DataArtifact, CHECKPOINT_FILE, DATASET_FILE, LOG_FILE};
pub use config::{AblationSection, DataSection, EvalSection, PretrainSection, RunConfig};

use crate::data::events::TimeFormat;
use crate::data::variant::InputVariant;
use crate::Error;

/// Environment variable naming the base directory for command outputs.
pub const OUTPUT_ENV: &str = "AIDMAE_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "aidmae", version, about = "Dual-masked autoencoder for incomplete clinical time-series tables")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: $AIDMAE_OUTPUT_DIR/<command>, else runs/<command>].
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// Directory written by `synth` or `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `pretrain`; a randomly initialised model when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Mini-batch size for forward passes.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset with correlated features and
    /// controlled missingness.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num_samples: Option<usize>,
        /// Input variant: full, zero_fill_vasopressor or no_24h.
        #[arg(long)]
        variant: Option<InputVariant>,
    },
    /// Turn an event CSV into normalised daily grids with a subject-disjoint
    /// temporal split.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Event CSV `subject_id,stay_id,feature_id,time,value[,end_time]`.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Label CSV `stay_id,task,label`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Feature registry JSON.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, value_parser = parse_time_format)]
        time_format: Option<TimeFormat>,
        /// Admissions at or after this time (epoch minutes) form the test split.
        #[arg(long)]
        cut_time: Option<i64>,
        #[arg(long)]
        variant: Option<InputVariant>,
    },
    /// Masked-autoencoder pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synth` or `preprocess`.
        #[arg(long)]
        data: PathBuf,
        /// Total epochs (the cosine schedule's horizon).
        #[arg(long)]
        epochs: Option<usize>,
        /// Mask policy slope `a`.
        #[arg(long, allow_hyphen_values = true)]
        mask_a: Option<f64>,
        /// Mask policy base rate `b`.
        #[arg(long)]
        mask_b: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Supervised fine-tuning of encoder and head on a labelled task.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train only the classification head.
        #[arg(long)]
        freeze_encoder: bool,
    },
    /// Logistic-regression probes on frozen CLS embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        task: Option<String>,
        /// Training-data percentages, e.g. 1,5,10,50,100.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Probe seeds, e.g. 2020,2021.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Also probe median-imputed raw features.
        #[arg(long)]
        baseline: bool,
    },
    /// Single-value reconstruction on the test split.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Imputation under extra random or panel masking on the test split.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Extra masking ratios in [0, 1).
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Registry panels to hide.
        #[arg(long, value_delimiter = ',')]
        panels: Option<Vec<String>>,
    },
    /// Dump the CLS embedding of every sample to CSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Pretrain and evaluate every (masking policy, input variant) cell of
    /// the ablation grid, one metrics row per cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Full-variant dataset directory; synthetic data from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn parse_time_format(s: &str) -> Result<TimeFormat, String> {
    match s {
        "iso" => Ok(TimeFormat::Iso),
        "epoch_minutes" => Ok(TimeFormat::EpochMinutes),
        _ => Err(format!("unknown time format {s:?} (iso, epoch_minutes)")),
    }
}

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Io { .. } | Error::Json(_) | Error::Csv(_) => 2,
        _ => 3,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(dispatch(["aidmae", "frobnicate"]), 1);
        assert_eq!(dispatch(["aidmae", "synth", "--bogus"]), 1);
        assert_eq!(dispatch(["aidmae", "synth", "--help"]), 0);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Data("x".into())), 2);
        assert_eq!(exit_code(&Error::Diverged("x".into())), 3);
    }
}
