//! Bayesian hyperparameter search with grouped cross-validation.

mod gp;
mod space;

pub use gp::{expected_improvement, GaussianProcess};
pub use space::{Dimension, SearchSpace};

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{f1_score, F1Mode, Hyperparams};
use crate::sampling::{oversample_minority, SmoteConfig};

/// Exploration margin for expected improvement, on the standardized scale.
pub const EI_XI: f64 = 0.01;
const RANDOM_CANDIDATES: usize = 2000;
const LOCAL_CANDIDATES: usize = 200;

/// How a trial's point was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    /// Space-filling initial design.
    Seed,
    /// Maximizer of expected improvement.
    Surrogate,
    /// Random point after the surrogate failed to fit.
    Fallback,
    /// Plain random search.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub point: Vec<f64>,
    pub value: f64,
    pub proposal: Proposal,
}

/// Number of space-filling trials before the surrogate takes over.
pub fn initial_design_size(space: &SearchSpace) -> usize {
    5.max(space.len() + 1)
}

/// Maximize `objective` over `space` with a GP surrogate and expected improvement.
/// The objective receives the iteration index and the point.
pub fn optimize<F>(space: &SearchSpace, n_iter: usize, seed: u64, mut objective: F) -> Result<Vec<Observation>>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    space.validate()?;
    if n_iter == 0 {
        return Err(Error::InvalidParameter(
            "the search needs at least one iteration".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design = space.latin_hypercube(initial_design_size(space), &mut rng);
    let mut observations: Vec<Observation> = Vec::with_capacity(n_iter);
    for it in 0..n_iter {
        let (point, proposal) = match design.get(it) {
            Some(p) => (p.clone(), Proposal::Seed),
            None => propose(space, &observations, &mut rng),
        };
        let value = objective(it, &point)?;
        log::debug!("trial {it}: {value:.6} ({proposal:?})");
        observations.push(Observation { point, value, proposal });
    }
    Ok(observations)
}

/// Uniform random search with the same budget and interface as [`optimize`].
pub fn random_search<F>(space: &SearchSpace, n_iter: usize, seed: u64, mut objective: F) -> Result<Vec<Observation>>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_iter)
        .map(|it| {
            let point = space.sample(&mut rng);
            let value = objective(it, &point)?;
            Ok(Observation {
                point,
                value,
                proposal: Proposal::Random,
            })
        })
        .collect()
}

fn propose(space: &SearchSpace, observations: &[Observation], rng: &mut ChaCha8Rng) -> (Vec<f64>, Proposal) {
    let x: Vec<Vec<f64>> = observations.iter().map(|o| space.encode(&o.point)).collect();
    let y: Vec<f64> = observations.iter().map(|o| o.value).collect();
    let gp = match GaussianProcess::fit(&x, &y) {
        Ok(gp) => gp,
        Err(e) => {
            log::warn!("surrogate fit failed ({e}); proposing a random point");
            return (space.sample(rng), Proposal::Fallback);
        }
    };
    let best = gp.standardize(y.iter().copied().fold(f64::NEG_INFINITY, f64::max));

    let mut candidates: Vec<Vec<f64>> = (0..RANDOM_CANDIDATES).map(|_| space.sample(rng)).collect();
    // Local moves around the best observations sharpen the final approach.
    let mut ranked: Vec<&Observation> = observations.iter().collect();
    ranked.sort_by(|a, b| b.value.total_cmp(&a.value));
    let step = Normal::new(0.0, 0.05).expect("valid normal");
    for anchor in ranked.iter().take(3) {
        let base = space.to_unit(&anchor.point);
        for _ in 0..LOCAL_CANDIDATES {
            let u: Vec<f64> = base
                .iter()
                .zip(&space.dims)
                .map(|(&b, (_, dim))| match dim {
                    Dimension::Categorical { .. } if rng.random::<f64>() < 0.2 => rng.random(),
                    Dimension::Categorical { .. } => b,
                    _ => (b + step.sample(rng)).clamp(0.0, 1.0),
                })
                .collect();
            candidates.push(space.from_unit(&u));
        }
    }

    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|c| {
            let (m, s) = gp.predict_standardized(&space.encode(c));
            expected_improvement(m, s, best, EI_XI)
        })
        .collect();
    let mut arg = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[arg] {
            arg = i;
        }
    }
    (candidates.swap_remove(arg), Proposal::Surrogate)
}

/// Assign each sample a fold so that groups never span folds. Groups are
/// placed largest first, each into the fold with the fewest samples.
pub fn grouped_kfold(groups: &[String], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds == 0 {
        return Err(Error::InvalidParameter("at least one fold is required".into()));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for g in groups {
        *sizes.entry(g.as_str()).or_default() += 1;
    }
    if sizes.len() < folds {
        return Err(Error::TooFewGroups {
            groups: sizes.len(),
            folds,
        });
    }
    let mut order: Vec<(&str, usize)> = sizes.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|g| std::cmp::Reverse(g.1));

    let mut load = vec![0usize; folds];
    let mut fold_of_group: BTreeMap<&str, usize> = BTreeMap::new();
    for (g, n) in order {
        let k = (0..folds).min_by_key(|&k| (load[k], k)).expect("folds > 0");
        load[k] += n;
        fold_of_group.insert(g, k);
    }
    Ok(groups.iter().map(|g| fold_of_group[g.as_str()]).collect())
}

/// Where SMOTE runs relative to the cross-validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoteOrder {
    /// On each fold's training portion only.
    #[default]
    InsideFolds,
    /// Once on the full training set before folds are drawn. Synthetic rows
    /// become singleton groups and may land in validation folds.
    BeforeSplit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneOptions {
    pub n_iter: usize,
    pub folds: usize,
    pub seed: u64,
    pub smote: Option<SmoteConfig>,
    pub smote_order: SmoteOrder,
    pub f1_mode: F1Mode,
    pub threshold: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            n_iter: 60,
            folds: 5,
            seed: 0,
            smote: None,
            smote_order: SmoteOrder::InsideFolds,
            f1_mode: F1Mode::Macro,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub iteration: usize,
    pub hp: Hyperparams,
    pub fold_f1: Vec<f64>,
    pub mean_f1: f64,
    pub train_f1_mean: f64,
    pub proposal: Proposal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best: Hyperparams,
    pub best_iteration: usize,
    pub trials: Vec<TrialRecord>,
}

impl TuneResult {
    pub fn write_trials<W: Write>(&self, mut writer: W) -> Result<()> {
        for t in &self.trials {
            serde_json::to_writer(&mut writer, t)?;
            writer.write_all(b"\n").map_err(|e| Error::io("trial log", e))?;
        }
        Ok(())
    }
}

/// Per-fold validation and training F1 for one hyperparameter setting.
pub fn cross_validate(
    x: &Array2<f64>,
    y: &[u8],
    fold_of: &[usize],
    folds: usize,
    hp: &Hyperparams,
    smote: Option<&SmoteConfig>,
    opts: &TuneOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let scores: Vec<(f64, f64)> = (0..folds)
        .into_par_iter()
        .map(|k| {
            let tr: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] != k).collect();
            let va: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] == k).collect();
            let x_tr = x.select(Axis(0), &tr);
            let y_tr: Vec<u8> = tr.iter().map(|&i| y[i]).collect();
            let x_va = x.select(Axis(0), &va);
            let y_va: Vec<u8> = va.iter().map(|&i| y[i]).collect();
            let model = crate::model::fit_with_smote(&x_tr, &y_tr, hp, smote, opts.seed)?;
            let label = |s: Vec<f64>| -> Vec<u8> { s.into_iter().map(|p| u8::from(p >= opts.threshold)).collect() };
            let train_f1 = f1_score(&y_tr, &label(model.predict_proba(x_tr.view())?), opts.f1_mode);
            let val_f1 = f1_score(&y_va, &label(model.predict_proba(x_va.view())?), opts.f1_mode);
            Ok((val_f1, train_f1))
        })
        .collect::<Result<_>>()?;
    Ok(scores.into_iter().unzip())
}

/// Search `space` for the setting with the best mean grouped-CV F1.
/// Ties go to the earliest trial.
pub fn bayes_search(
    x: ArrayView2<f64>,
    y: &[u8],
    groups: &[String],
    space: &SearchSpace,
    opts: &TuneOptions,
) -> Result<TuneResult> {
    if opts.folds < 2 {
        return Err(Error::InvalidParameter(
            "cross-validation needs at least two folds".into(),
        ));
    }
    if groups.len() != y.len() || x.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "{} samples, {} labels, {} groups",
            x.nrows(),
            y.len(),
            groups.len()
        )));
    }
    let (x, y, groups, inner_smote) = match (opts.smote, opts.smote_order) {
        (Some(cfg), SmoteOrder::BeforeSplit) => {
            let (xs, ys, added) = oversample_minority(&x.to_owned(), y, &cfg)?;
            let mut g = groups.to_vec();
            g.extend((0..added).map(|i| format!("synthetic-{i}")));
            (xs, ys, g, None)
        }
        (cfg, _) => (x.to_owned(), y.to_vec(), groups.to_vec(), cfg),
    };
    let fold_of = grouped_kfold(&groups, opts.folds, opts.seed)?;

    let mut trials: Vec<TrialRecord> = Vec::with_capacity(opts.n_iter);
    let observations = optimize(space, opts.n_iter, opts.seed, |iteration, point| {
        let hp = space.to_hyperparams(point)?;
        let (fold_f1, train_f1) = cross_validate(&x, &y, &fold_of, opts.folds, &hp, inner_smote.as_ref(), opts)?;
        let mean_f1 = fold_f1.iter().sum::<f64>() / fold_f1.len() as f64;
        let train_f1_mean = train_f1.iter().sum::<f64>() / train_f1.len() as f64;
        log::info!("trial {iteration}: mean F1 {mean_f1:.4}");
        trials.push(TrialRecord {
            iteration,
            hp,
            fold_f1,
            mean_f1,
            train_f1_mean,
            proposal: Proposal::Seed,
        });
        Ok(mean_f1)
    })?;
    for (t, o) in trials.iter_mut().zip(&observations) {
        t.proposal = o.proposal;
    }
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.mean_f1 > trials[best].mean_f1 {
            best = i;
        }
    }
    Ok(TuneResult {
        best: trials[best].hp,
        best_iteration: best,
        trials,
    })
}
