//! Subject-grouped, stratified train/test splitting and SMOTE oversampling.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StratifyBy {
    #[default]
    BatchCondition,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub stratum: String,
    pub samples: usize,
    pub subjects: usize,
    pub largest_group: usize,
    pub train_samples: usize,
    /// Achieved train fraction minus target.
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub target_fraction: f64,
    pub strata: Vec<StratumReport>,
    /// Strata whose single subject makes the target unreachable.
    pub warnings: Vec<String>,
}

impl SplitResult {
    /// Column indices of train and test samples within `d`.
    pub fn indices(&self, d: &Dataset) -> (Vec<usize>, Vec<usize>) {
        let train: std::collections::HashSet<&str> = self.train.iter().map(String::as_str).collect();
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for (j, s) in d.matrix().sample_ids().iter().enumerate() {
            if train.contains(s.as_str()) {
                tr.push(j);
            } else {
                te.push(j);
            }
        }
        (tr, te)
    }
}

/// Assign whole subjects to train or test so each stratum's train share is
/// as close to `fraction` as group sizes allow.
///
/// Within a stratum, subjects are shuffled with the seed and then taken
/// largest first; a subject goes to train when that moves the train count
/// no further from the target than leaving it out. This keeps each stratum
/// within half its largest subject of the target. Subjects with samples in
/// several strata are homed in their majority stratum.
pub fn grouped_stratified_split(d: &Dataset, fraction: f64, seed: u64, stratify: StratifyBy) -> Result<SplitResult> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split fraction {fraction} must lie in (0, 1)"
        )));
    }
    let key_of = |j: usize| {
        let m = &d.metadata()[j];
        match stratify {
            StratifyBy::BatchCondition => format!("{}/{}", m.batch, m.condition),
            StratifyBy::Batch => m.batch.clone(),
        }
    };

    let mut subjects: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, m) in d.metadata().iter().enumerate() {
        subjects.entry(m.subject_id.as_str()).or_default().push(j);
    }
    let mut strata: BTreeMap<String, Vec<(&str, usize)>> = BTreeMap::new();
    for (subject, cols) in &subjects {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for &j in cols {
            *counts.entry(key_of(j)).or_default() += 1;
        }
        let home = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(k, _)| k.clone())
            .expect("subject has samples");
        strata.entry(home).or_default().push((subject, cols.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train: BTreeMap<&str, bool> = BTreeMap::new();
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for (key, mut groups) in strata {
        groups.shuffle(&mut rng);
        groups.sort_by_key(|g| std::cmp::Reverse(g.1));
        let size: usize = groups.iter().map(|g| g.1).sum();
        let target = fraction * size as f64;
        let mut train = 0usize;
        for &(subject, n) in &groups {
            let take = (train as f64 + n as f64 / 2.0) <= target;
            if take {
                train += n;
            }
            in_train.insert(subject, take);
        }
        let deviation = train as f64 / size as f64 - fraction;
        if groups.len() == 1 {
            warnings.push(format!(
                "stratum {key} has a single subject; train fraction deviates by {deviation:.3}"
            ));
        }
        reports.push(StratumReport {
            stratum: key,
            samples: size,
            subjects: groups.len(),
            largest_group: groups.first().map_or(0, |g| g.1),
            train_samples: train,
            deviation,
        });
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for m in d.metadata() {
        if in_train[m.subject_id.as_str()] {
            train.push(m.sample_id.clone());
        } else {
            test.push(m.sample_id.clone());
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SplitResult {
        train,
        test,
        seed,
        target_fraction: fraction,
        strata: reports,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoteConfig {
    pub k_neighbors: usize,
    /// Target minority count as a fraction of the majority count.
    pub sampling_ratio: f64,
    pub seed: u64,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            sampling_ratio: 1.0,
            seed: 0,
        }
    }
}

/// `max(0, ceil(ratio × majority) − minority)`.
pub fn synthetic_count(minority: usize, majority: usize, ratio: f64) -> usize {
    // 400/510 * 510 is not exactly 400 in binary floating point
    let target = (ratio * majority as f64 - 1e-9).ceil().max(0.0) as usize;
    target.saturating_sub(minority)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoteOutput {
    /// Synthetic samples × features.
    pub samples: Array2<f64>,
    /// Minority row each synthetic point starts from.
    pub base: Vec<usize>,
    /// Minority row it moves toward.
    pub neighbor: Vec<usize>,
    /// Interpolation fraction in [0, 1).
    pub gap: Vec<f64>,
}

/// Interpolate `n_synthetic` points between minority rows and their nearest
/// minority neighbours. Base rows are visited in a seeded permutation, cycling.
pub fn smote_oversample(minority: &Array2<f64>, cfg: &SmoteConfig, n_synthetic: usize) -> Result<SmoteOutput> {
    let n = minority.nrows();
    if cfg.k_neighbors == 0 {
        return Err(Error::InvalidParameter("SMOTE needs k >= 1".into()));
    }
    if n <= cfg.k_neighbors {
        return Err(Error::TooFewMinoritySamples {
            have: n,
            k: cfg.k_neighbors,
        });
    }
    let n_features = minority.ncols();
    let mut out = SmoteOutput {
        samples: Array2::zeros((n_synthetic, n_features)),
        base: Vec::with_capacity(n_synthetic),
        neighbor: Vec::with_capacity(n_synthetic),
        gap: Vec::with_capacity(n_synthetic),
    };
    if n_synthetic == 0 {
        return Ok(out);
    }
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d2: f64 = minority
                        .row(i)
                        .iter()
                        .zip(minority.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d2, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(cfg.k_neighbors).map(|(_, j)| j).collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for s in 0..n_synthetic {
        let i = order[s % n];
        let nn = neighbours[i][rng.random_range(0..cfg.k_neighbors)];
        let u: f64 = rng.random();
        let mut row = out.samples.row_mut(s);
        for f in 0..n_features {
            let (a, b) = (minority[[i, f]], minority[[nn, f]]);
            row[f] = a + u * (b - a);
        }
        out.base.push(i);
        out.neighbor.push(nn);
        out.gap.push(u);
    }
    Ok(out)
}

/// Append SMOTE samples of the minority class to a labelled training set.
/// Returns the augmented features, labels and the number of synthetic rows.
pub fn oversample_minority(x: &Array2<f64>, y: &[u8], cfg: &SmoteConfig) -> Result<(Array2<f64>, Vec<u8>, usize)> {
    if !(cfg.sampling_ratio > 0.0 && cfg.sampling_ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "SMOTE sampling ratio {} must lie in (0, 1]",
            cfg.sampling_ratio
        )));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    let neg = y.len() - pos;
    let minority_label = if pos < neg { 1u8 } else { 0u8 };
    let (n_min, n_maj) = (pos.min(neg), pos.max(neg));
    let count = synthetic_count(n_min, n_maj, cfg.sampling_ratio);
    if count == 0 {
        return Ok((x.clone(), y.to_vec(), 0));
    }
    let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == minority_label).collect();
    let minority = x.select(Axis(0), &rows);
    let synth = smote_oversample(&minority, cfg, count)?;
    let stacked =
        ndarray::concatenate(Axis(0), &[x.view(), synth.samples.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let mut labels = y.to_vec();
    labels.extend(std::iter::repeat_n(minority_label, count));
    Ok((stacked, labels, count))
}
