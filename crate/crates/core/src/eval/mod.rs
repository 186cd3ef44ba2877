//! Metrics and evaluation protocols.

mod logistic;
mod metrics;
mod probe;
mod recon;

pub use logistic::{logistic_objective, LogisticConfig, LogisticRegression};
pub use metrics::{auprc, auroc, regression_metrics, MeanSd, RegressionMetrics};
pub use probe::{fit_medians, linear_probe, median_imputed, stratified_subsample, ProbeConfig, ProbeRow, ProbeSummary};
pub use recon::{
    embeddings, imputation_sweep, predict_logits, reconstruct_visible, single_value_reconstruction,
    value_range, FeatureRecon, ReconReport, SweepMode,
};
