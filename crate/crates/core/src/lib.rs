//! Dual-masked autoencoder for incomplete, irregularly sampled clinical
//! time-series tables.
//!
//! Each patient-day becomes a fixed grid of `L` measurement tokens (value plus
//! hours-before-midnight timestamp). Slots that were never recorded carry the
//! *intrinsic* mask and never reach the encoder or the loss; during
//! pretraining an *augmented* mask additionally hides a random subset of the
//! recorded tokens, and the decoder reconstructs both kept and hidden values.
//!
//! Modules:
//! - [`masking`]: intrinsic/augmented mask algebra, logit reweighting, batch padding
//! - [`model`]: encoder/decoder transformer and classification head
//! - [`objective`]: dual reconstruction loss and BCE
//! - [`data`]: event ingestion, daily grids, normalization, splits, synthetic data
//! - [`trainer`]: AdamW, cosine schedule, pretraining and fine-tuning loops
//! - [`eval`]: AUROC/AUPRC, regression metrics, linear probe, reconstruction sweeps
//! - [`cli`]: config-driven command runner behind the `aidmae` binary

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
