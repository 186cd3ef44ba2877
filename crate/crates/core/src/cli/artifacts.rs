use std::path::{Path, PathBuf};

use log::info;

use crate::data::store::{self, Manifest, Processed};
use crate::model::Model;
use crate::trainer::Checkpoint;
use crate::{Error, Result};

pub const DATASET_FILE: &str = "dataset.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";

/// A processed dataset together with the manifest that vouches for it.
pub struct DataArtifact {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub processed: Processed,
    pub hash: String,
}

pub fn load_data(dir: &Path) -> Result<DataArtifact> {
    let manifest = Manifest::load(dir)?;
    if manifest.command != "synth" && manifest.command != "preprocess" {
        return Err(Error::Data(format!(
            "{} holds `{}` output, not a processed dataset",
            dir.display(),
            manifest.command
        )));
    }
    let path = manifest.verified_output(dir, DATASET_FILE)?;
    let hash = manifest.outputs[DATASET_FILE].clone();
    let processed = store::load(&path)?;
    info!("loaded {} samples of length {} from {}", processed.dataset.samples.len(), processed.dataset.grid_len(), path.display());
    Ok(DataArtifact {
        dir: dir.to_path_buf(),
        manifest,
        processed,
        hash,
    })
}

/// Pretraining checkpoint in `dir`, refused unless it was trained on `data`.
pub fn load_checkpoint(dir: &Path, data: &DataArtifact) -> Result<Checkpoint> {
    let manifest = Manifest::load(dir)?;
    if manifest.command != "pretrain" {
        return Err(Error::Data(format!(
            "{} holds `{}` output, not a pretraining run",
            dir.display(),
            manifest.command
        )));
    }
    match manifest.inputs.get(DATASET_FILE) {
        Some(h) if *h == data.hash => {}
        _ => {
            return Err(Error::Data(format!(
                "checkpoint in {} was not trained on the dataset in {}",
                dir.display(),
                data.dir.display()
            )))
        }
    }
    Checkpoint::load(&manifest.verified_output(dir, CHECKPOINT_FILE)?)
}

/// Best pretrained model from `dir`, or a freshly initialised one when no
/// checkpoint is given.
pub fn model_for(checkpoint: Option<&Path>, data: &DataArtifact, fresh: impl FnOnce() -> Result<Model>) -> Result<Model> {
    match checkpoint {
        Some(dir) => Ok(load_checkpoint(dir, data)?.best_model()),
        None => fresh(),
    }
}
