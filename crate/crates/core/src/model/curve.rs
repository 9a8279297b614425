use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::f1_score;
use super::{train, F1Mode, Hyperparams, TreeEnsemble};
use crate::error::Result;
use crate::sampling::{oversample_minority, SmoteConfig};
use crate::tune::grouped_kfold;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveOptions {
    pub folds: usize,
    pub seed: u64,
    /// Oversample the minority class of each training subset.
    pub smote: Option<SmoteConfig>,
    pub f1_mode: F1Mode,
    pub threshold: f64,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            smote: None,
            f1_mode: F1Mode::Macro,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    /// Mean number of real training samples per fold.
    pub n_train: f64,
    pub train_f1: f64,
    pub val_f1: f64,
    pub train_f1_folds: Vec<f64>,
    pub val_f1_folds: Vec<f64>,
}

/// Train on `x`/`y`, optionally after SMOTE. Subsets too small for the
/// configured neighbourhood are used as they are.
pub(crate) fn fit_with_smote(
    x: &Array2<f64>,
    y: &[u8],
    hp: &Hyperparams,
    smote: Option<&SmoteConfig>,
    seed: u64,
) -> Result<TreeEnsemble> {
    if let Some(cfg) = smote {
        let minority = y
            .iter()
            .filter(|&&l| l == 1)
            .count()
            .min(y.iter().filter(|&&l| l == 0).count());
        if minority > cfg.k_neighbors {
            let (xs, ys, _) = oversample_minority(x, y, cfg)?;
            return train(xs.view(), &ys, hp, seed);
        }
        log::warn!(
            "skipping SMOTE: {minority} minority samples is not more than k = {}",
            cfg.k_neighbors
        );
    }
    train(x.view(), y, hp, seed)
}

pub(crate) fn hard_labels(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

/// Train and validation F1 as a function of the share of each fold's
/// training portion used for fitting. Subsets grow by whole groups in a
/// seeded order, so smaller fractions are nested in larger ones.
pub fn learning_curve(
    x: ArrayView2<f64>,
    y: &[u8],
    groups: Option<&[String]>,
    hp: &Hyperparams,
    fractions: &[f64],
    opts: &CurveOptions,
) -> Result<Vec<CurvePoint>> {
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(crate::Error::InvalidParameter(format!(
                "fraction {f} must lie in (0, 1]"
            )));
        }
    }
    let owned_groups: Vec<String>;
    let groups = match groups {
        Some(g) => g,
        None => {
            owned_groups = (0..y.len()).map(|i| i.to_string()).collect();
            &owned_groups
        }
    };
    let fold_of = grouped_kfold(groups, opts.folds, opts.seed)?;

    let per_fold: Vec<Vec<(usize, f64, f64)>> = (0..opts.folds)
        .into_par_iter()
        .map(|k| -> Result<Vec<(usize, f64, f64)>> {
            let train_rows: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] != k).collect();
            let val_rows: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] == k).collect();
            let x_val = x.select(Axis(0), &val_rows);
            let y_val: Vec<u8> = val_rows.iter().map(|&i| y[i]).collect();

            let mut group_names: Vec<&str> = train_rows.iter().map(|&i| groups[i].as_str()).collect();
            group_names.sort_unstable();
            group_names.dedup();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
            group_names.shuffle(&mut rng);

            fractions
                .iter()
                .map(|&fraction| {
                    let target = (fraction * train_rows.len() as f64).ceil() as usize;
                    let mut chosen: Vec<usize> = Vec::new();
                    for g in &group_names {
                        let has_both = chosen.iter().any(|&i| y[i] == 0) && chosen.iter().any(|&i| y[i] == 1);
                        if chosen.len() >= target && has_both {
                            break;
                        }
                        chosen.extend(train_rows.iter().copied().filter(|&i| groups[i] == *g));
                    }
                    chosen.sort_unstable();
                    let x_sub = x.select(Axis(0), &chosen);
                    let y_sub: Vec<u8> = chosen.iter().map(|&i| y[i]).collect();
                    let model = fit_with_smote(&x_sub, &y_sub, hp, opts.smote.as_ref(), opts.seed)?;
                    let train_pred = hard_labels(&model.predict_proba(x_sub.view())?, opts.threshold);
                    let val_pred = hard_labels(&model.predict_proba(x_val.view())?, opts.threshold);
                    Ok((
                        chosen.len(),
                        f1_score(&y_sub, &train_pred, opts.f1_mode),
                        f1_score(&y_val, &val_pred, opts.f1_mode),
                    ))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(fractions
        .iter()
        .enumerate()
        .map(|(j, &fraction)| {
            let n = opts.folds as f64;
            let train_f1_folds: Vec<f64> = per_fold.iter().map(|f| f[j].1).collect();
            let val_f1_folds: Vec<f64> = per_fold.iter().map(|f| f[j].2).collect();
            CurvePoint {
                fraction,
                n_train: per_fold.iter().map(|f| f[j].0 as f64).sum::<f64>() / n,
                train_f1: train_f1_folds.iter().sum::<f64>() / n,
                val_f1: val_f1_folds.iter().sum::<f64>() / n,
                train_f1_folds,
                val_f1_folds,
            }
        })
        .collect())
}
