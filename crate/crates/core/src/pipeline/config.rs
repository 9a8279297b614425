use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::combat::Covariate;
use crate::data::MatrixFormat;
use crate::error::{Error, Result};
use crate::model::{F1Mode, Hyperparams};
use crate::preprocess::QuantileMode;
use crate::qc::{BIMODALITY_THRESHOLD, DEFAULT_MIXTURE_K};
use crate::sampling::StratifyBy;
use crate::tune::SmoteOrder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortInput {
    pub matrix: PathBuf,
    pub metadata: PathBuf,
    /// Defaults to the matrix file extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<MatrixFormat>,
    /// Input stores samples as rows.
    #[serde(default)]
    pub transpose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeConfig {
    pub quantile: QuantileMode,
    pub log2: bool,
    pub log2_offset: f64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            quantile: QuantileMode::PerBatch,
            log2: true,
            log2_offset: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombatConfig {
    pub enabled: bool,
    pub covariate: Covariate,
}

impl Default for CombatConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            covariate: Covariate::Condition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcConfig {
    pub enabled: bool,
    pub pca_components: usize,
    pub mixture_k: usize,
    pub fdr: f64,
    pub bimodality_threshold: f64,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pca_components: 10,
            mixture_k: DEFAULT_MIXTURE_K,
            fdr: 0.05,
            bimodality_threshold: BIMODALITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeclusterConfig {
    pub enabled: bool,
    pub r_threshold: f64,
    pub absolute: bool,
}

impl Default for DeclusterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            r_threshold: 0.9,
            absolute: true,
        }
    }
}

/// Which samples the min-max scaler is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalingFit {
    /// All samples, before the split.
    #[default]
    Full,
    /// Training samples only; test values may fall outside [0, 1].
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub stratify: StratifyBy,
    pub scaling_fit: ScalingFit,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.75,
            seed: None,
            stratify: StratifyBy::BatchCondition,
            scaling_fit: ScalingFit::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoteSection {
    pub enabled: bool,
    pub k_neighbors: usize,
    pub sampling_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SmoteSection {
    fn default() -> Self {
        Self {
            enabled: true,
            k_neighbors: 5,
            sampling_ratio: 1.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub enabled: bool,
    pub n_iter: usize,
    pub folds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub smote_order: SmoteOrder,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_iter: 60,
            folds: 5,
            seed: None,
            smote_order: SmoteOrder::InsideFolds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Used verbatim when tuning is off.
    pub hyperparams: Hyperparams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub threshold: f64,
    pub f1_mode: F1Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyperparams: Hyperparams::default(),
            seed: None,
            threshold: 0.5,
            f1_mode: F1Mode::Macro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub learning_curve: bool,
    pub fractions: Vec<f64>,
    pub folds: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            learning_curve: true,
            fractions: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            folds: 5,
        }
    }
}

/// Which fitted model the attributions explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExplainModel {
    /// Refit on all samples with the chosen hyperparameters.
    #[default]
    Full,
    /// The model fitted on the training split.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub enabled: bool,
    pub model: ExplainModel,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            model: ExplainModel::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeaConfig {
    pub enabled: bool,
    pub fdr: f64,
}

impl Default for DeaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            fdr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub enabled: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

/// Full pipeline configuration. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    /// Default for every stage seed left unset.
    pub seed: u64,
    #[serde(rename = "cohort")]
    pub cohorts: Vec<CohortInput>,
    #[serde(default)]
    pub normalize: NormalizeConfig,
    #[serde(default)]
    pub combat: CombatConfig,
    #[serde(default)]
    pub qc: QcConfig,
    #[serde(default)]
    pub decluster: DeclusterConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub smote: SmoteSection,
    #[serde(default)]
    pub tune: TuneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub dea: DeaConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read, resolve relative paths and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        for c in &mut self.cohorts {
            join(&mut c.matrix);
            join(&mut c.metadata);
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn smote_seed(&self) -> u64 {
        self.smote.seed.unwrap_or(self.seed)
    }

    pub fn tune_seed(&self) -> u64 {
        self.tune.seed.unwrap_or(self.seed)
    }

    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.cohorts.is_empty() {
            return fail("at least one [[cohort]] is required".into());
        }
        for c in &self.cohorts {
            for p in [&c.matrix, &c.metadata] {
                if !p.is_file() {
                    return fail(format!("input file {} does not exist", p.display()));
                }
            }
        }
        if self.normalize.log2 && (self.normalize.log2_offset.is_nan() || self.normalize.log2_offset < 0.0) {
            return fail("normalize.log2_offset must be non-negative".into());
        }
        if self.qc.pca_components == 0 || self.qc.mixture_k == 0 {
            return fail("qc.pca_components and qc.mixture_k must be positive".into());
        }
        for (name, fdr) in [("qc.fdr", self.qc.fdr), ("dea.fdr", self.dea.fdr)] {
            if !(fdr > 0.0 && fdr < 1.0) {
                return fail(format!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.decluster.r_threshold > 0.0 && self.decluster.r_threshold < 1.0) {
            return fail("decluster.r_threshold must lie in (0, 1)".into());
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return fail("split.train_fraction must lie in (0, 1)".into());
        }
        if self.smote.enabled
            && (self.smote.k_neighbors == 0 || !(self.smote.sampling_ratio > 0.0 && self.smote.sampling_ratio <= 1.0))
        {
            return fail("smote needs k_neighbors >= 1 and sampling_ratio in (0, 1]".into());
        }
        if self.tune.enabled && (self.tune.n_iter == 0 || self.tune.folds < 2) {
            return fail("tune needs n_iter >= 1 and folds >= 2".into());
        }
        if !self.tune.enabled {
            self.train
                .hyperparams
                .validate()
                .map_err(|e| Error::Config(format!("train.hyperparams: {e}")))?;
        }
        if !(self.train.threshold > 0.0 && self.train.threshold < 1.0) {
            return fail("train.threshold must lie in (0, 1)".into());
        }
        if self.evaluate.learning_curve
            && (self.evaluate.folds < 2 || self.evaluate.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)))
        {
            return fail("evaluate needs folds >= 2 and fractions in (0, 1]".into());
        }
        if self.compare.enabled && !(self.explain.enabled && self.dea.enabled) {
            return fail("compare requires both explain and dea".into());
        }
        Ok(())
    }

    /// A complete configuration for the given cohorts with default stage settings.
    pub fn for_cohorts(output_dir: PathBuf, seed: u64, cohorts: Vec<CohortInput>) -> Self {
        Self {
            output_dir,
            seed,
            cohorts,
            normalize: Default::default(),
            combat: Default::default(),
            qc: Default::default(),
            decluster: Default::default(),
            split: Default::default(),
            smote: Default::default(),
            tune: Default::default(),
            train: Default::default(),
            evaluate: Default::default(),
            explain: Default::default(),
            dea: Default::default(),
            compare: Default::default(),
        }
    }
}
