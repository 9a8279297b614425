use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::Tree;
use super::Hyperparams;
use crate::error::{Error, Result};
use crate::stats::sigmoid;

/// Initial margin of the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseScore {
    /// Log-odds of the weighted positive rate.
    #[default]
    Prior,
    /// A fixed probability in (0, 1).
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainOptions {
    pub base_score: BaseScore,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub trees: Vec<Tree>,
    /// Initial margin (log-odds).
    pub base_score: f64,
    pub hp: Hyperparams,
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub ensemble: TreeEnsemble,
    /// Weighted training log-loss before the first round and after each round.
    pub loss_history: Vec<f64>,
}

/// L1 soft-thresholded Newton step for a node with gradient sum `g` and hessian sum `h`.
pub fn leaf_weight(g: f64, h: f64, reg_alpha: f64, reg_lambda: f64) -> f64 {
    let shrunk = (g.abs() - reg_alpha).max(0.0);
    -g.signum() * shrunk / (h + reg_lambda)
}

/// Structure-score improvement of splitting a node into `(gl, hl)` and `(gr, hr)`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, reg_lambda: f64, gamma: f64) -> f64 {
    let g = gl + gr;
    let h = hl + hr;
    0.5 * (gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda) - g * g / (h + reg_lambda)) - gamma
}

pub fn train(x: ArrayView2<f64>, y: &[u8], hp: &Hyperparams, seed: u64) -> Result<TreeEnsemble> {
    train_with_options(
        x,
        y,
        hp,
        &TrainOptions {
            seed,
            ..Default::default()
        },
    )
    .map(|out| out.ensemble)
}

pub fn train_with_options(x: ArrayView2<f64>, y: &[u8], hp: &Hyperparams, opts: &TrainOptions) -> Result<TrainOutput> {
    hp.validate()?;
    let (n, n_features) = x.dim();
    if y.len() != n {
        return Err(Error::Shape(format!("{} labels for {} samples", y.len(), n)));
    }
    if let Some(&bad) = y.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidParameter(format!("label {bad} is not binary")));
    }
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::SingleClass);
    }
    if let Some(((i, j), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            gene: format!("feature {j}"),
            sample: format!("row {i}"),
        });
    }

    let weights: Vec<f64> = y
        .iter()
        .map(|&l| if l == 1 { hp.scale_pos_weight } else { 1.0 })
        .collect();
    let base_score = match opts.base_score {
        BaseScore::Prior => {
            let pos: f64 = weights.iter().zip(y).filter(|(_, &l)| l == 1).map(|(w, _)| w).sum();
            let neg: f64 = weights.iter().zip(y).filter(|(_, &l)| l == 0).map(|(w, _)| w).sum();
            (pos / neg).ln()
        }
        BaseScore::Fixed(p) => {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidParameter(format!("base score {p} is not a probability")));
            }
            (p / (1.0 - p)).ln()
        }
    };

    let presorted = Presorted::new(x);
    let mut work = presorted.clone();
    let x_std = x.as_standard_layout();
    let mut margin = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut loss_history = vec![weighted_log_loss(&margin, y, &weights)];
    let mut trees = Vec::with_capacity(hp.n_estimators);
    for _ in 0..hp.n_estimators {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            grad[i] = weights[i] * (p - f64::from(y[i]));
            hess[i] = weights[i] * p * (1.0 - p);
        }
        work.reset_from(&presorted);
        let mut builder = Builder {
            work: &mut work,
            grad: &grad,
            hess: &hess,
            hp,
            goes_left: vec![false; n],
            scratch: Vec::with_capacity(n),
        };
        let tree = builder.build();
        for (m, row) in margin.iter_mut().zip(x_std.rows()) {
            *m += tree.predict_row(row.as_slice().expect("standard layout"));
        }
        loss_history.push(weighted_log_loss(&margin, y, &weights));
        trees.push(tree);
    }

    Ok(TrainOutput {
        ensemble: TreeEnsemble {
            trees,
            base_score,
            hp: *hp,
            feature_names: (0..n_features).map(|f| format!("f{f}")).collect(),
            seed: opts.seed,
        },
        loss_history,
    })
}

fn weighted_log_loss(margin: &[f64], y: &[u8], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut weight = 0.0;
    for ((&m, &l), &w) in margin.iter().zip(y).zip(weights) {
        // -log sigmoid(m) = softplus(-m), computed stably
        let z = if l == 1 { -m } else { m };
        let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
        total += w * softplus;
        weight += w;
    }
    total / weight
}

/// Per-feature row orders, feature-major, plus one trailing segment holding the
/// rows in index order. A node owns the same `[start, start + len)` range of
/// every segment; splits partition each segment in place, stably.
#[derive(Debug, Clone)]
struct Presorted {
    n: usize,
    n_features: usize,
    rows: Vec<u32>,
    values: Vec<f64>,
}

impl Presorted {
    fn new(x: ArrayView2<f64>) -> Self {
        let (n, n_features) = x.dim();
        let mut rows = Vec::with_capacity((n_features + 1) * n);
        let mut values = Vec::with_capacity((n_features + 1) * n);
        for f in 0..n_features {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_by(|&a, &b| x[[a as usize, f]].total_cmp(&x[[b as usize, f]]));
            values.extend(order.iter().map(|&i| x[[i as usize, f]]));
            rows.extend(order);
        }
        rows.extend(0..n as u32);
        values.resize((n_features + 1) * n, 0.0);
        Self {
            n,
            n_features,
            rows,
            values,
        }
    }

    fn reset_from(&mut self, other: &Self) {
        self.rows.copy_from_slice(&other.rows);
        self.values.copy_from_slice(&other.values);
    }

    fn segment(&self, seg: usize, start: usize, len: usize) -> (&[u32], &[f64]) {
        let lo = seg * self.n + start;
        (&self.rows[lo..lo + len], &self.values[lo..lo + len])
    }
}

struct Builder<'a> {
    work: &'a mut Presorted,
    grad: &'a [f64],
    hess: &'a [f64],
    hp: &'a Hyperparams,
    goes_left: Vec<bool>,
    scratch: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Builder<'_> {
    fn build(&mut self) -> Tree {
        let mut tree = Tree::default();
        self.grow(&mut tree, 0, self.work.n, 0);
        tree
    }

    fn can_split(&self, len: usize, h: f64, depth: usize) -> bool {
        depth < self.hp.max_depth && len >= 2 && h >= 2.0 * self.hp.min_child_weight
    }

    fn grow(&mut self, tree: &mut Tree, start: usize, len: usize, depth: usize) -> usize {
        let (rows, _) = self.work.segment(self.work.n_features, start, len);
        let g: f64 = rows.iter().map(|&i| self.grad[i as usize]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i as usize]).sum();
        let weight = leaf_weight(g, h, self.hp.reg_alpha, self.hp.reg_lambda) * self.hp.learning_rate;
        let node = tree.push_leaf(weight, h);
        if !self.can_split(len, h, depth) {
            return node;
        }
        let Some(best) = self.best_split(start, len, g, h) else {
            return node;
        };

        let (f_rows, f_values) = self.work.segment(best.feature, start, len);
        let mut n_left = 0;
        let mut h_left = 0.0;
        for (&i, &v) in f_rows.iter().zip(f_values) {
            let left = v < best.threshold;
            self.goes_left[i as usize] = left;
            if left {
                n_left += 1;
            }
        }
        for &i in self.work.segment(self.work.n_features, start, len).0 {
            if self.goes_left[i as usize] {
                h_left += self.hess[i as usize];
            }
        }
        if self.can_split(n_left, h_left, depth + 1) || self.can_split(len - n_left, h - h_left, depth + 1) {
            self.partition(start, len);
        } else {
            self.partition_segment(self.work.n_features, start, len);
        }
        let left = self.grow(tree, start, n_left, depth + 1);
        let right = self.grow(tree, start + n_left, len - n_left, depth + 1);
        tree.make_split(node, best.feature, best.threshold, best.gain, left, right);
        node
    }

    fn partition(&mut self, start: usize, len: usize) {
        for seg in 0..=self.work.n_features {
            self.partition_segment(seg, start, len);
        }
    }

    fn partition_segment(&mut self, seg: usize, start: usize, len: usize) {
        let lo = seg * self.work.n + start;
        let rows = &mut self.work.rows[lo..lo + len];
        let values = &mut self.work.values[lo..lo + len];
        let right = &mut self.scratch;
        right.clear();
        let mut k = 0;
        for j in 0..len {
            if self.goes_left[rows[j] as usize] {
                rows[k] = rows[j];
                values[k] = values[j];
                k += 1;
            } else {
                right.push((rows[j], values[j]));
            }
        }
        for (j, &(r, v)) in right.iter().enumerate() {
            rows[k + j] = r;
            values[k + j] = v;
        }
    }

    fn best_split(&self, start: usize, len: usize, g: f64, h: f64) -> Option<Candidate> {
        let per_feature: Vec<Option<Candidate>> = (0..self.work.n_features)
            .into_par_iter()
            .map(|f| {
                let (rows, values) = self.work.segment(f, start, len);
                self.best_for_feature(f, rows, values, g, h)
            })
            .collect();
        // Strict comparison keeps the lowest feature index on ties.
        per_feature
            .into_iter()
            .flatten()
            .fold(None, |best: Option<Candidate>, c| match best {
                Some(b) if b.gain >= c.gain => Some(b),
                _ => Some(c),
            })
            .filter(|c| c.gain > 0.0)
    }

    fn best_for_feature(&self, f: usize, rows: &[u32], values: &[f64], g: f64, h: f64) -> Option<Candidate> {
        let hp = self.hp;
        let mut gl = 0.0;
        let mut hl = 0.0;
        let mut best: Option<Candidate> = None;
        for k in 0..rows.len().saturating_sub(1) {
            let cur = rows[k] as usize;
            gl += self.grad[cur];
            hl += self.hess[cur];
            let (lo, hi) = (values[k], values[k + 1]);
            if hi <= lo {
                continue;
            }
            let (gr, hr) = (g - gl, h - hl);
            if hl < hp.min_child_weight || hr < hp.min_child_weight {
                continue;
            }
            let gain = split_gain(gl, hl, gr, hr, hp.reg_lambda, hp.gamma);
            if best.is_none_or(|b| gain > b.gain) {
                let mid = 0.5 * (lo + hi);
                let threshold = if mid > lo { mid } else { hi };
                best = Some(Candidate {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
        best
    }
}

impl TreeEnsemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.feature_names.len() {
            return Err(Error::FeatureCountMismatch {
                expected: self.feature_names.len(),
                got: names.len(),
            });
        }
        self.feature_names = names;
        Ok(self)
    }

    /// Checks structural invariants, including depth against `hp.max_depth`.
    pub fn validate(&self) -> Result<()> {
        for tree in &self.trees {
            tree.check(self.n_features())?;
            if tree.depth() > self.hp.max_depth {
                return Err(Error::Shape(format!(
                    "tree depth {} exceeds max_depth {}",
                    tree.depth(),
                    self.hp.max_depth
                )));
            }
        }
        if !self.base_score.is_finite() {
            return Err(Error::Shape("base score is not finite".into()));
        }
        Ok(())
    }

    pub fn predict_row_margin(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.n_features() {
            return Err(Error::FeatureCountMismatch {
                expected: self.n_features(),
                got: row.len(),
            });
        }
        Ok(self.base_score + self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>())
    }

    pub fn predict_margin(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features() {
            return Err(Error::FeatureCountMismatch {
                expected: self.n_features(),
                got: x.ncols(),
            });
        }
        let x = x.as_standard_layout();
        Ok(x.rows()
            .into_iter()
            .map(|row| {
                let row = row.as_slice().expect("standard layout");
                self.base_score + self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
            })
            .collect())
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.predict_margin(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(text)?;
        e.validate()?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hp(n_estimators: usize, max_depth: usize) -> Hyperparams {
        Hyperparams {
            n_estimators,
            max_depth,
            ..Default::default()
        }
    }

    #[test]
    fn leaf_weight_newton_step() {
        assert!((leaf_weight(-2.0, 4.0, 0.0, 1.0) - 0.4).abs() < 1e-15);
        assert_eq!(leaf_weight(0.5, 4.0, 1.0, 1.0), 0.0);
        assert!((leaf_weight(3.0, 1.0, 1.0, 1.0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn root_split_matches_exhaustive_search() {
        let x = array![[1.0, 5.0], [2.0, 3.0], [3.0, 3.0], [4.0, 1.0], [5.0, 0.0], [6.0, 2.0]];
        let y = [0u8, 0, 1, 0, 1, 1];
        let params = Hyperparams {
            n_estimators: 50,
            max_depth: 2,
            min_child_weight: 1.0,
            ..Default::default()
        };
        let out = train_with_options(
            x.view(),
            &y,
            &params,
            &TrainOptions {
                base_score: BaseScore::Fixed(0.5),
                seed: 0,
            },
        )
        .unwrap();
        let root = &out.ensemble.trees[0];

        // First round at p = 0.5: g = p - y, h = 1/4.
        let g: Vec<f64> = y.iter().map(|&l| 0.5 - f64::from(l)).collect();
        let h = [0.25; 6];
        let mut best = (f64::NEG_INFINITY, 0usize, 0.0f64);
        for f in 0..2 {
            let mut values: Vec<f64> = x.column(f).to_vec();
            values.sort_by(f64::total_cmp);
            values.dedup();
            for w in values.windows(2) {
                let thr = 0.5 * (w[0] + w[1]);
                let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..6 {
                    if x[[i, f]] < thr {
                        gl += g[i];
                        hl += h[i];
                    } else {
                        gr += g[i];
                        hr += h[i];
                    }
                }
                if hl < 1.0 || hr < 1.0 {
                    continue;
                }
                let gain = 0.5
                    * (gl * gl / (hl + params.reg_lambda) + gr * gr / (hr + params.reg_lambda)
                        - (gl + gr).powi(2) / (hl + hr + params.reg_lambda))
                    - params.gamma;
                if gain > best.0 {
                    best = (gain, f, thr);
                }
            }
        }
        if best.0 > 0.0 {
            assert_eq!(root.feature[0], best.1 as i64);
            assert!((root.threshold[0] - best.2).abs() < 1e-12);
            assert!((root.gain[0] - best.0).abs() < 1e-12);
        } else {
            assert!(root.is_leaf(0));
        }
    }

    fn separable(n: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 4));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            for j in 0..4 {
                x[[i, j]] = rng.random::<f64>();
            }
            x[[i, 1]] += if label == 1 { 1.5 } else { 0.0 };
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn separable_toy_fits_training_set() {
        let (x, y) = separable(50, 3);
        let out = train_with_options(x.view(), &y, &hp(100, 3), &TrainOptions::default()).unwrap();
        let proba = out.ensemble.predict_proba(x.view()).unwrap();
        let predicted: Vec<u8> = proba.iter().map(|&p| u8::from(p >= 0.5)).collect();
        assert_eq!(predicted, y);
        for w in out.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose from {} to {}", w[0], w[1]);
        }
        out.ensemble.validate().unwrap();
    }

    #[test]
    fn empty_ensemble_predicts_prior() {
        let (x, y) = separable(20, 1);
        let mut e = train(x.view(), &y, &hp(50, 2), 0).unwrap();
        e.trees.clear();
        let p = e.predict_proba(x.view()).unwrap();
        assert!(p.iter().all(|&v| (v - sigmoid(e.base_score)).abs() < 1e-15));
        assert!((e.base_score - 0.0).abs() < 1e-12);
    }

    #[test]
    fn margins_are_additive_over_trees() {
        let (x, y) = separable(40, 7);
        let e = train(x.view(), &y, &hp(60, 4), 0).unwrap();
        let mut a = e.clone();
        let mut b = e.clone();
        a.trees.truncate(25);
        b.trees.drain(..25);
        let whole = e.predict_margin(x.view()).unwrap();
        let pa = a.predict_margin(x.view()).unwrap();
        let pb = b.predict_margin(x.view()).unwrap();
        for i in 0..whole.len() {
            assert!((whole[i] - (pa[i] + pb[i] - e.base_score)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_split_gives_two_probabilities() {
        let (x, y) = separable(30, 5);
        let mut e = train(x.view(), &y, &hp(50, 2), 0).unwrap();
        let mut stump = Tree::default();
        stump.push_leaf(0.0, 1.0);
        let l = stump.push_leaf(-1.0, 1.0);
        let r = stump.push_leaf(1.0, 1.0);
        stump.make_split(0, 1, 0.9, 1.0, l, r);
        e.trees = vec![stump];
        let p = e.predict_proba(x.view()).unwrap();
        let mut distinct = p.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
        for i in 0..30 {
            assert_eq!(p[i] > 0.5, x[[i, 1]] >= 0.9);
        }
    }

    #[test]
    fn errors_and_determinism() {
        let (x, y) = separable(30, 9);
        assert!(matches!(
            train(x.view(), &[0; 30], &hp(50, 2), 0),
            Err(Error::SingleClass)
        ));
        let e1 = train(x.view(), &y, &hp(50, 3), 1).unwrap();
        let e2 = train(x.view(), &y, &hp(50, 3), 1).unwrap();
        assert_eq!(e1.to_json().unwrap(), e2.to_json().unwrap());
        let narrow = x.slice(ndarray::s![.., ..3]);
        assert!(matches!(
            e1.predict_margin(narrow),
            Err(Error::FeatureCountMismatch { .. })
        ));
        let back = TreeEnsemble::from_json(&e1.to_json().unwrap()).unwrap();
        assert_eq!(back, e1);
    }

    #[test]
    fn splits_respect_constraints() {
        let (x, y) = separable(80, 11);
        let params = Hyperparams {
            n_estimators: 50,
            max_depth: 4,
            min_child_weight: 2.0,
            ..Default::default()
        };
        let e = train(x.view(), &y, &params, 0).unwrap();
        for t in &e.trees {
            assert!(t.depth() <= 4);
            for node in 0..t.len() {
                if !t.is_leaf(node) {
                    assert!(t.gain[node] > 0.0);
                    assert!(t.cover[t.left[node] as usize] >= 2.0);
                    assert!(t.cover[t.right[node] as usize] >= 2.0);
                }
            }
        }
    }
}
