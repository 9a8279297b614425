//! Second-order gradient-boosted trees for binary classification.

mod booster;
mod curve;
mod metrics;
mod tree;

pub use booster::{
    leaf_weight, split_gain, train, train_with_options, BaseScore, TrainOptions, TrainOutput, TreeEnsemble,
};
pub(crate) use curve::fit_with_smote;
pub use curve::{learning_curve, CurveOptions, CurvePoint};
pub use metrics::{evaluate, evaluate_scores, f1_score, roc_auc, roc_curve, EvalReport, F1Mode, RocPoint};
pub use tree::Tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two admissible `scale_pos_weight` values.
pub const SCALE_POS_WEIGHT_CHOICES: [f64; 2] = [1.0, 400.0 / 510.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Minimum split gain.
    pub gamma: f64,
    pub reg_alpha: f64,
    pub reg_lambda: f64,
    pub min_child_weight: f64,
    pub scale_pos_weight: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: 6,
            learning_rate: 0.3,
            gamma: 1e-4,
            reg_alpha: 1e-4,
            reg_lambda: 1.0,
            min_child_weight: 1.0,
            scale_pos_weight: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        fn check(name: &str, ok: bool, value: impl std::fmt::Display) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "{name} = {value} is outside the search space"
                )))
            }
        }
        check(
            "n_estimators",
            (50..=600).contains(&self.n_estimators),
            self.n_estimators,
        )?;
        check("max_depth", (2..=15).contains(&self.max_depth), self.max_depth)?;
        check(
            "learning_rate",
            (1e-3..=1.0).contains(&self.learning_rate),
            self.learning_rate,
        )?;
        check("gamma", (1e-4..=100.0).contains(&self.gamma), self.gamma)?;
        check("reg_alpha", (1e-4..=100.0).contains(&self.reg_alpha), self.reg_alpha)?;
        check("reg_lambda", (1e-4..=100.0).contains(&self.reg_lambda), self.reg_lambda)?;
        check(
            "min_child_weight",
            (1.0..=10.0).contains(&self.min_child_weight),
            self.min_child_weight,
        )?;
        check(
            "scale_pos_weight",
            SCALE_POS_WEIGHT_CHOICES
                .iter()
                .any(|c| (c - self.scale_pos_weight).abs() < 1e-12),
            self.scale_pos_weight,
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("hyperparameters serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let hp: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        hp.validate()?;
        Ok(hp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let hp = Hyperparams::default();
        hp.validate().unwrap();
        assert_eq!(Hyperparams::from_toml(&hp.to_toml()).unwrap(), hp);
        let bad = Hyperparams { max_depth: 16, ..hp };
        assert!(bad.validate().is_err());
        let bad = Hyperparams {
            scale_pos_weight: 0.5,
            ..hp
        };
        assert!(bad.validate().is_err());
        let ok = Hyperparams {
            scale_pos_weight: 400.0 / 510.0,
            ..hp
        };
        ok.validate().unwrap();
    }
}
