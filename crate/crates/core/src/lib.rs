//! Tree-distilled multi-task learning for tabular data.
//!
//! Per-task gradient-boosted tree ensembles are turned into dense leaf
//! embeddings, which then serve as distillation targets for a shared-trunk
//! multi-task network. The crate also ships the evaluation machinery
//! (AUROC, AUPRC, calibration, K-fold aggregation) and a synthetic cohort
//! generator with correlated, imbalanced binary outcomes.

pub mod dataset;
pub mod distill;
pub mod error;
pub mod gbdt;
pub mod metrics;
pub mod mtl;
pub mod nn;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
