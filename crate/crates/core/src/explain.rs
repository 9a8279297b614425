//! Exact path-dependent TreeSHAP attributions for tree ensembles.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Tree, TreeEnsemble};

/// Per-sample feature attributions on the margin scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    /// Samples × features.
    pub values: Array2<f64>,
    /// Expected margin under the training cover distribution.
    pub base_value: f64,
    pub feature_names: Vec<String>,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub gene: String,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub base_value: f64,
    pub n_samples: usize,
    pub ranking: Vec<RankedFeature>,
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: i64,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: i64) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let denom = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) as f64 / denom;
        path[i].weight = zero_fraction * path[i].weight * (depth - i) as f64 / denom;
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let denom = (depth + 1) as f64;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let held = path[i].weight;
            path[i].weight = next * denom / ((i + 1) as f64 * one_fraction);
            next = held - path[i].weight * zero_fraction * (depth - i) as f64 / denom;
        } else {
            path[i].weight = path[i].weight * denom / (zero_fraction * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

/// Total path weight if the element at `index` were unwound.
fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let denom = (depth + 1) as f64;
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let held = next * denom / ((i + 1) as f64 * one_fraction);
            total += held;
            next = path[i].weight - held * zero_fraction * (depth - i) as f64 / denom;
        } else if zero_fraction != 0.0 {
            total += path[i].weight / zero_fraction * denom / (depth - i) as f64;
        }
    }
    total
}

struct Walk<'a> {
    tree: &'a Tree,
    cover: &'a [f64],
    row: &'a [f64],
}

impl Walk<'_> {
    fn recurse(
        &self,
        phi: &mut [f64],
        node: usize,
        mut path: Vec<PathElement>,
        zero_fraction: f64,
        one_fraction: f64,
        feature: i64,
    ) {
        extend_path(&mut path, zero_fraction, one_fraction, feature);
        let t = self.tree;
        if t.is_leaf(node) {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let el = path[i];
                phi[el.feature as usize] += w * (el.one_fraction - el.zero_fraction) * t.weight[node];
            }
            return;
        }
        let split = t.feature[node];
        let (left, right) = (t.left[node] as usize, t.right[node] as usize);
        let (hot, cold) = if self.row[split as usize] < t.threshold[node] {
            (left, right)
        } else {
            (right, left)
        };
        let (mut incoming_zero, mut incoming_one) = (1.0, 1.0);
        if let Some(k) = (1..path.len()).find(|&k| path[k].feature == split) {
            incoming_zero = path[k].zero_fraction;
            incoming_one = path[k].one_fraction;
            unwind_path(&mut path, k);
        }
        let c = self.cover[node];
        self.recurse(
            phi,
            hot,
            path.clone(),
            self.cover[hot] / c * incoming_zero,
            incoming_one,
            split,
        );
        self.recurse(phi, cold, path, self.cover[cold] / c * incoming_zero, 0.0, split);
    }
}

/// Cover-weighted expected output of a tree.
pub fn expected_value(tree: &Tree) -> Result<f64> {
    fn descend(t: &Tree, cover: &[f64], node: usize) -> f64 {
        if t.is_leaf(node) {
            return t.weight[node];
        }
        let (l, r) = (t.left[node] as usize, t.right[node] as usize);
        let c = cover[node];
        cover[l] / c * descend(t, cover, l) + cover[r] / c * descend(t, cover, r)
    }
    if tree.is_empty() {
        return Ok(0.0);
    }
    Ok(descend(tree, tree.covers()?, 0))
}

/// Attributions of one tree for one row, added into `phi`.
pub fn tree_shap_row(tree: &Tree, row: &[f64], phi: &mut [f64]) -> Result<()> {
    if tree.is_empty() {
        return Ok(());
    }
    let walk = Walk {
        tree,
        cover: tree.covers()?,
        row,
    };
    walk.recurse(phi, 0, Vec::with_capacity(16), 1.0, 1.0, -1);
    Ok(())
}

pub fn tree_shap(e: &TreeEnsemble, x: ArrayView2<f64>) -> Result<AttributionMatrix> {
    let n_features = e.n_features();
    if x.ncols() != n_features {
        return Err(Error::FeatureCountMismatch {
            expected: n_features,
            got: x.ncols(),
        });
    }
    let mut base_value = e.base_score;
    for t in &e.trees {
        base_value += expected_value(t)?;
    }
    let x = x.as_standard_layout();
    let rows: Vec<Vec<f64>> = x
        .rows()
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|row| {
            let row = row.as_slice().expect("standard layout");
            let mut phi = vec![0.0; n_features];
            for t in &e.trees {
                tree_shap_row(t, row, &mut phi)?;
            }
            Ok(phi)
        })
        .collect::<Result<_>>()?;
    let values = Array2::from_shape_fn((rows.len(), n_features), |(i, j)| rows[i][j]);
    Ok(AttributionMatrix {
        sample_ids: (0..rows.len()).map(|i| format!("s{i}")).collect(),
        values,
        base_value,
        feature_names: e.feature_names.clone(),
    })
}

/// Features by mean absolute attribution, descending, with zero-importance
/// features dropped and ties ordered by name.
pub fn shap_feature_ranking(a: &AttributionMatrix) -> Vec<RankedFeature> {
    let n = a.values.nrows().max(1) as f64;
    let mut ranking: Vec<RankedFeature> = a
        .feature_names
        .iter()
        .zip(a.values.columns())
        .map(|(name, col)| RankedFeature {
            gene: name.clone(),
            importance: col.iter().map(|v| v.abs()).sum::<f64>() / n,
        })
        .filter(|r| r.importance != 0.0)
        .collect();
    ranking.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| a.gene.cmp(&b.gene)));
    ranking
}

impl AttributionMatrix {
    pub fn with_sample_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.values.nrows() {
            return Err(Error::Shape(format!(
                "{} sample ids for {} attribution rows",
                ids.len(),
                self.values.nrows()
            )));
        }
        self.sample_ids = ids;
        Ok(self)
    }

    /// Largest |base + Σ attributions − margin| over samples.
    pub fn local_accuracy_error(&self, margins: &[f64]) -> f64 {
        self.values
            .rows()
            .into_iter()
            .zip(margins)
            .map(|(row, m)| (self.base_value + row.sum() - m).abs())
            .fold(0.0, f64::max)
    }

    pub fn summary(&self) -> ShapSummary {
        ShapSummary {
            base_value: self.base_value,
            n_samples: self.values.nrows(),
            ranking: shap_feature_ranking(self),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.sample_ids.iter().zip(self.values.rows()) {
            let mut record = vec![id.clone()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("attribution csv", e))?;
        Ok(())
    }
}
