//! Expression-matrix classification pipeline.
//!
//! Cohort merging, normalization, ComBat batch correction, QC, gene
//! declustering, grouped stratified splitting with SMOTE, gradient-boosted
//! trees tuned by Bayesian optimization, exact TreeSHAP attribution, and
//! Wilcoxon/BH differential expression compared against SHAP-selected genes.

pub mod combat;
pub mod data;
pub mod dea;
pub mod decluster;
pub mod error;
pub mod explain;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod qc;
pub mod sampling;
pub mod stats;
pub mod synth;
pub mod tune;

pub use error::{Error, Result};
