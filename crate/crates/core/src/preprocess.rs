//! Quantile normalization, log2 transform and per-gene min-max scaling.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use indexmap::IndexMap;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExpressionMatrix};
use crate::error::{Error, Result};

/// Force every sample (column) onto the mean distribution of order statistics.
///
/// Tied values in a column receive the mean of the reference quantiles over
/// the span of ranks they occupy.
pub fn quantile_normalize(m: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    let (n_genes, n_samples) = m.values().dim();
    if n_samples < 2 {
        return Err(Error::DegenerateInput(
            "quantile normalization needs at least two samples".into(),
        ));
    }
    let orders: Vec<Vec<usize>> = m
        .values()
        .axis_iter(Axis(1))
        .map(|col| {
            let mut idx: Vec<usize> = (0..n_genes).collect();
            idx.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap_or(Ordering::Equal));
            idx
        })
        .collect();

    let mut reference = vec![0.0; n_genes];
    for (s, order) in orders.iter().enumerate() {
        for (rank, &g) in order.iter().enumerate() {
            reference[rank] += m.values()[[g, s]];
        }
    }
    for r in &mut reference {
        *r /= n_samples as f64;
    }

    let mut out = Array2::zeros((n_genes, n_samples));
    for (s, order) in orders.iter().enumerate() {
        let col = m.values().column(s);
        let mut start = 0;
        while start < n_genes {
            let mut end = start + 1;
            while end < n_genes && col[order[end]] == col[order[start]] {
                end += 1;
            }
            let value = reference[start..end].iter().sum::<f64>() / (end - start) as f64;
            for &g in &order[start..end] {
                out[[g, s]] = value;
            }
            start = end;
        }
    }
    m.with_values(out)
}

/// Quantile-normalize each batch's columns separately.
pub fn quantile_normalize_per_batch(d: &Dataset) -> Result<Dataset> {
    let mut values = d.matrix().values().clone();
    for cols in d.batch_columns().values() {
        let sub = d.matrix().select_samples(cols);
        let normed = quantile_normalize(&sub)?;
        for (k, &c) in cols.iter().enumerate() {
            values.column_mut(c).assign(&normed.values().column(k));
        }
    }
    d.with_matrix(d.matrix().with_values(values)?)
}

/// Elementwise `log2(x + offset)`.
pub fn log2_transform(m: &ExpressionMatrix, offset: f64) -> Result<ExpressionMatrix> {
    if !(offset >= 0.0 && offset.is_finite()) {
        return Err(Error::InvalidParameter(format!("log2 offset {offset} must be >= 0")));
    }
    if let Some(((g, s), &v)) = m.values().indexed_iter().find(|(_, &v)| v + offset <= 0.0) {
        return Err(Error::NonPositiveValue {
            gene: m.gene_ids()[g].clone(),
            sample: m.sample_ids()[s].clone(),
            value: v,
        });
    }
    m.with_values(m.values().mapv(|v| (v + offset).log2()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneRange {
    pub min: f64,
    pub max: f64,
}

/// Per-gene min/max fitted on one matrix and reusable on others.
/// Serializes as `{gene_id: {min, max}}` in gene order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalingParams {
    ranges: IndexMap<String, GeneRange>,
}

impl ScalingParams {
    pub fn fit(m: &ExpressionMatrix) -> Self {
        let ranges = m
            .gene_ids()
            .iter()
            .zip(m.values().outer_iter())
            .map(|(g, row)| {
                let min = row.iter().copied().fold(f64::INFINITY, f64::min);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (g.clone(), GeneRange { min, max })
            })
            .collect();
        Self { ranges }
    }

    pub fn get(&self, gene: &str) -> Option<GeneRange> {
        self.ranges.get(gene).copied()
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    fn range_for(&self, gene: &str) -> Result<GeneRange> {
        self.get(gene)
            .ok_or_else(|| Error::InvalidParameter(format!("no scaling parameters for gene '{gene}'")))
    }

    /// Values outside the fitted range map outside [0, 1] unless `clamp` is set.
    /// Constant genes map to 0.
    pub fn transform(&self, m: &ExpressionMatrix, clamp: bool) -> Result<ExpressionMatrix> {
        let mut out = m.values().clone();
        for (g, mut row) in m.gene_ids().iter().zip(out.outer_iter_mut()) {
            let r = self.range_for(g)?;
            let span = r.max - r.min;
            row.mapv_inplace(|x| {
                let y = if span > 0.0 { (x - r.min) / span } else { 0.0 };
                if clamp {
                    y.clamp(0.0, 1.0)
                } else {
                    y
                }
            });
        }
        m.with_values(out)
    }

    pub fn inverse_transform(&self, m: &ExpressionMatrix) -> Result<ExpressionMatrix> {
        let mut out = m.values().clone();
        for (g, mut row) in m.gene_ids().iter().zip(out.outer_iter_mut()) {
            let r = self.range_for(g)?;
            row.mapv_inplace(|y| r.min + y * (r.max - r.min));
        }
        m.with_values(out)
    }
}

pub fn minmax_fit_transform(m: &ExpressionMatrix) -> Result<(ExpressionMatrix, ScalingParams)> {
    let params = ScalingParams::fit(m);
    let out = params.transform(m, false)?;
    Ok((out, params))
}

/// How quantile normalization is applied relative to the cohort merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantileMode {
    #[default]
    PerBatch,
    Global,
    None,
}

/// Per-gene sample variance (n − 1 denominator), keyed by gene.
pub fn gene_variances(m: &ExpressionMatrix) -> BTreeMap<String, f64> {
    m.gene_ids()
        .iter()
        .zip(m.values().outer_iter())
        .map(|(g, row)| (g.clone(), crate::stats::variance(row.iter().copied())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(values: Array2<f64>) -> ExpressionMatrix {
        let (g, s) = values.dim();
        ExpressionMatrix::new(
            (0..g).map(|i| format!("g{i}")).collect(),
            (0..s).map(|i| format!("s{i}")).collect(),
            values,
        )
        .unwrap()
    }

    /// Sort each column, average across columns rank by rank, write back by rank.
    fn sort_average_unsort(v: &Array2<f64>) -> Array2<f64> {
        let (g, s) = v.dim();
        let mut sorted_cols: Vec<Vec<f64>> = (0..s)
            .map(|j| {
                let mut c: Vec<f64> = v.column(j).to_vec();
                c.sort_by(|a, b| a.partial_cmp(b).unwrap());
                c
            })
            .collect();
        let means: Vec<f64> = (0..g)
            .map(|r| sorted_cols.iter().map(|c| c[r]).sum::<f64>() / s as f64)
            .collect();
        let mut out = Array2::zeros((g, s));
        for j in 0..s {
            for i in 0..g {
                let rank = sorted_cols[j].iter().position(|&x| x == v[[i, j]]).unwrap();
                out[[i, j]] = means[rank];
            }
        }
        sorted_cols.clear();
        out
    }

    #[test]
    fn quantile_two_columns() {
        let m = matrix(array![[1.0, 6.0], [2.0, 4.0], [3.0, 5.0]]);
        let q = quantile_normalize(&m).unwrap();
        assert_eq!(q.values(), &array![[2.5, 4.5], [3.5, 2.5], [4.5, 3.5]]);
    }

    #[test]
    fn quantile_identical_columns_unchanged() {
        let m = matrix(array![[1.0, 1.0], [5.0, 5.0], [3.0, 3.0]]);
        assert_eq!(quantile_normalize(&m).unwrap(), m);
    }

    #[test]
    fn quantile_single_sample_rejected() {
        let m = matrix(array![[1.0], [2.0]]);
        assert!(matches!(quantile_normalize(&m), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn quantile_ties_share_reference_mean() {
        // sorted cols [1,1,3] and [4,5,6] give reference [2.5, 3, 4.5]; ranks 0 and 1 tie in column 0.
        let m = matrix(array![[1.0, 4.0], [1.0, 5.0], [3.0, 6.0]]);
        let q = quantile_normalize(&m).unwrap();
        assert_eq!(q.values().column(0).to_vec(), vec![2.75, 2.75, 4.5]);
    }

    #[test]
    fn quantile_matches_sort_average_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = Array2::from_shape_fn((50, 10), |_| rng.random::<f64>() * 10.0);
        let q = quantile_normalize(&matrix(v.clone())).unwrap();
        let oracle = sort_average_unsort(&v);
        for (a, b) in q.values().iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let means: Vec<f64> = q.values().axis_iter(Axis(1)).map(|c| c.mean().unwrap()).collect();
        for m in &means {
            assert!((m - means[0]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn quantile_idempotent_and_rank_preserving(
            seed in 0u64..1000, genes in 3usize..30, samples in 2usize..8
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Array2::from_shape_fn((genes, samples), |_| rng.random::<f64>());
            let m = matrix(v.clone());
            let once = quantile_normalize(&m).unwrap();
            let twice = quantile_normalize(&once).unwrap();
            for (a, b) in once.values().iter().zip(twice.values().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for j in 0..samples {
                for a in 0..genes {
                    for b in 0..genes {
                        if v[[a, j]] < v[[b, j]] {
                            prop_assert!(once.values()[[a, j]] < once.values()[[b, j]]);
                        }
                    }
                }
            }
        }

        #[test]
        fn minmax_bounds_and_inverse(seed in 0u64..1000, genes in 1usize..20, samples in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Array2::from_shape_fn((genes, samples), |_| rng.random::<f64>() * 100.0 - 50.0);
            let m = matrix(v);
            let (scaled, params) = minmax_fit_transform(&m).unwrap();
            prop_assert!(scaled.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
            let back = params.inverse_transform(&scaled).unwrap();
            for (a, b) in back.values().iter().zip(m.values().iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn log2_values() {
        let m = matrix(array![[3.0, 1.0]]);
        let out = log2_transform(&m, 1.0).unwrap();
        assert_eq!(out.values(), &array![[2.0, 1.0]]);
        let out = log2_transform(&m, 0.0).unwrap();
        assert_eq!(out.values()[[0, 1]], 0.0);
        let z = matrix(array![[0.0, 1.0]]);
        assert!(matches!(log2_transform(&z, 0.0), Err(Error::NonPositiveValue { .. })));
    }

    #[test]
    fn minmax_rows() {
        let m = matrix(array![[2.0, 4.0, 6.0], [5.0, 5.0, 5.0]]);
        let (out, params) = minmax_fit_transform(&m).unwrap();
        assert_eq!(out.values(), &array![[0.0, 0.5, 1.0], [0.0, 0.0, 0.0]]);
        assert!(params.get("g0").unwrap().max >= params.get("g0").unwrap().min);

        let fresh = matrix(array![[8.0, 2.0, 4.0], [5.0, 5.0, 5.0]]);
        let t = params.transform(&fresh, false).unwrap();
        assert_eq!(t.values()[[0, 0]], 1.5);
        let c = params.transform(&fresh, true).unwrap();
        assert_eq!(c.values()[[0, 0]], 1.0);
    }

    #[test]
    fn scaling_params_json_shape() {
        let m = matrix(array![[2.0, 4.0]]);
        let p = ScalingParams::fit(&m);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"g0":{"min":2.0,"max":4.0}}"#);
        let back: ScalingParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
