use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel child/feature index for leaves.
pub(crate) const LEAF: i64 = -1;

/// A binary regression tree stored as parallel node arrays. Node 0 is the root.
///
/// Internal nodes route `x[feature] < threshold` to `left`. Internal nodes keep
/// the weight they would have had as a leaf; only leaf weights are summed at
/// prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Tree {
    pub feature: Vec<i64>,
    pub threshold: Vec<f64>,
    pub left: Vec<i64>,
    pub right: Vec<i64>,
    pub default_left: Vec<bool>,
    pub weight: Vec<f64>,
    /// Hessian sum per node. Older or foreign models may omit it.
    #[serde(default)]
    pub cover: Vec<f64>,
    #[serde(default)]
    pub gain: Vec<f64>,
}

impl Tree {
    pub fn len(&self) -> usize {
        self.feature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_empty()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.feature[node] == LEAF
    }

    pub(crate) fn push_leaf(&mut self, weight: f64, cover: f64) -> usize {
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(LEAF);
        self.right.push(LEAF);
        self.default_left.push(true);
        self.weight.push(weight);
        self.cover.push(cover);
        self.gain.push(0.0);
        self.feature.len() - 1
    }

    pub(crate) fn make_split(
        &mut self,
        node: usize,
        feature: usize,
        threshold: f64,
        gain: f64,
        left: usize,
        right: usize,
    ) {
        self.feature[node] = feature as i64;
        self.threshold[node] = threshold;
        self.gain[node] = gain;
        self.left[node] = left as i64;
        self.right[node] = right as i64;
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut node = 0;
        while !self.is_leaf(node) {
            let f = self.feature[node] as usize;
            node = if row[f] < self.threshold[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
        node
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.weight[self.leaf_index(row)]
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, node: usize) -> usize {
            if t.is_leaf(node) {
                0
            } else {
                1 + walk(t, t.left[node] as usize).max(walk(t, t.right[node] as usize))
            }
        }
        if self.is_empty() {
            0
        } else {
            walk(self, 0)
        }
    }

    /// Node covers, or `MissingCover` if the model does not carry them.
    pub fn covers(&self) -> Result<&[f64]> {
        if self.cover.len() != self.len() {
            return Err(Error::MissingCover);
        }
        Ok(&self.cover)
    }

    pub(crate) fn check(&self, n_features: usize) -> Result<()> {
        let n = self.len();
        let arrays = [
            self.threshold.len(),
            self.left.len(),
            self.right.len(),
            self.default_left.len(),
            self.weight.len(),
        ];
        if arrays.iter().any(|&l| l != n) {
            return Err(Error::Shape("tree node arrays differ in length".into()));
        }
        for i in 0..n {
            if self.is_leaf(i) {
                if !self.weight[i].is_finite() {
                    return Err(Error::Shape(format!("leaf {i} has a non-finite weight")));
                }
                continue;
            }
            let f = self.feature[i];
            if f < 0 || f as usize >= n_features {
                return Err(Error::Shape(format!("node {i} uses feature {f} of {n_features}")));
            }
            for child in [self.left[i], self.right[i]] {
                if child <= i as i64 || child as usize >= n {
                    return Err(Error::Shape(format!("node {i} has invalid child {child}")));
                }
            }
        }
        Ok(())
    }
}
