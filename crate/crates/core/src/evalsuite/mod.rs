//! Frozen-encoder evaluation: corpus embedding, linear probing with
//! AUPRC/AUROC, linear segmentation with Dice, k-fold attribute
//! classification, group-stratified reporting, and bootstrap intervals.

pub mod embed;
pub mod metrics;
pub mod probe;
pub mod seg;

pub use embed::embed_corpus;
pub use metrics::{
    auprc, auroc, bin_continuous, bootstrap_ci, dice, mean_std, stratified_metric, BootstrapCi,
    GroupedValues, MetricsReport, BOOTSTRAP_RESAMPLES,
};
pub use probe::{
    kfold_linear_accuracy, majority_baseline, subject_folds, train_linear_probe, LinearProbe,
    ProbeConfig, ProbeOutcome,
};
pub use seg::{evaluate_seg, train_seg_linear, SegConfig, SegHead, SegSample};
