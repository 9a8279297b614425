//! Preprocessing quality checks: PCA, kNN batch mixture score, bimodality
//! screening and cross-batch differential expression.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::DMatrix;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Condition, Dataset, ExpressionMatrix};
use crate::dea;
use crate::error::{Error, Result};

pub const DEFAULT_MIXTURE_K: usize = 25;
pub const BIMODALITY_THRESHOLD: f64 = 5.0 / 9.0;
const MIXTURE_MAX_DIMS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Samples × components.
    pub scores: Array2<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Genes × components.
    pub loadings: Array2<f64>,
    /// Per-gene means removed before decomposition.
    pub center: Vec<f64>,
    pub rank: usize,
}

impl PcaResult {
    pub fn n_components(&self) -> usize {
        self.explained_variance_ratio.len()
    }

    /// Centered data rebuilt from the retained components (samples × genes).
    pub fn reconstruct_centered(&self) -> Array2<f64> {
        self.scores.dot(&self.loadings.t())
    }

    pub fn write_csv<W: Write>(&self, writer: W, d: &Dataset) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_id".to_string(), "batch".into(), "condition".into()];
        header.extend((1..=self.n_components()).map(|k| format!("PC{k}")));
        wtr.write_record(&header)?;
        for (i, m) in d.metadata().iter().enumerate() {
            let mut rec = vec![m.sample_id.clone(), m.batch.clone(), m.condition.to_string()];
            rec.extend(self.scores.row(i).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<pca writer>", e))?;
        Ok(())
    }
}

/// PCA of samples in gene space, via SVD of the gene-centered matrix.
///
/// Each component is sign-normalized so its largest-magnitude loading is positive.
pub fn pca(m: &ExpressionMatrix, n_components: usize) -> Result<PcaResult> {
    let (n_genes, n_samples) = m.values().dim();
    if n_components == 0 || n_components > n_genes.min(n_samples) {
        return Err(Error::InvalidParameter(format!(
            "n_components must be in 1..={}",
            n_genes.min(n_samples)
        )));
    }
    let center: Vec<f64> = m
        .values()
        .outer_iter()
        .map(|row| row.sum() / n_samples as f64)
        .collect();
    let x = DMatrix::from_fn(n_samples, n_genes, |i, g| m.values()[[g, i]] - center[g]);
    let svd = x.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let s_max = s.first().copied().unwrap_or(0.0);
    let tol = n_genes.max(n_samples) as f64 * f64::EPSILON * s_max;
    let rank = s.iter().filter(|&&v| v > tol).count();
    if n_components > rank {
        return Err(Error::RankDeficiency {
            requested: n_components,
            rank,
        });
    }
    let total: f64 = s.iter().map(|v| v * v).sum();

    let mut scores = Array2::zeros((n_samples, n_components));
    let mut loadings = Array2::zeros((n_genes, n_components));
    let mut ratios = Vec::with_capacity(n_components);
    for (c, &k) in order.iter().take(n_components).enumerate() {
        let mut pivot = 0;
        for g in 1..n_genes {
            if v_t[(k, g)].abs() > v_t[(k, pivot)].abs() {
                pivot = g;
            }
        }
        let sign = if v_t[(k, pivot)] < 0.0 { -1.0 } else { 1.0 };
        for g in 0..n_genes {
            loadings[[g, c]] = sign * v_t[(k, g)];
        }
        for i in 0..n_samples {
            scores[[i, c]] = sign * u[(i, k)] * s[c];
        }
        ratios.push(s[c] * s[c] / total);
    }
    Ok(PcaResult {
        scores,
        explained_variance_ratio: ratios,
        loadings,
        center,
        rank,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMixture {
    pub condition: Condition,
    pub score: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureScoreReport {
    pub per_condition: Vec<ConditionMixture>,
    pub mean_score: f64,
    pub k: usize,
    pub dims: usize,
}

/// kNN batch-mixing score in PCA space, computed within each condition.
///
/// For every sample, the fraction of its `k` nearest neighbours (same
/// condition) from another batch is divided by the fraction expected under
/// perfect mixing, `(n_c − n_b) / (n_c − 1)`. The condition score is half the
/// ratio of the means, clamped to [0, 1], so perfect mixing of two equal
/// batches scores 0.5 and complete separation scores 0.
pub fn mixture_score(d: &Dataset, k: usize) -> Result<MixtureScoreReport> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    let m = d.matrix();
    let max_dims = m.n_genes().min(m.n_samples());
    let probe = pca(m, 1).map_err(|e| match e {
        Error::RankDeficiency { .. } => Error::DegenerateInput("matrix has zero variance".into()),
        other => other,
    })?;
    let dims = probe.rank.min(MIXTURE_MAX_DIMS).min(max_dims);
    let scores = pca(m, dims)?.scores;

    let mut per_condition = Vec::new();
    for cond in [Condition::Control, Condition::Case] {
        let idx: Vec<usize> = d
            .metadata()
            .iter()
            .enumerate()
            .filter(|(_, md)| md.condition == cond)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let batch_of: Vec<&str> = idx.iter().map(|&i| d.metadata()[i].batch.as_str()).collect();
        let mut batch_sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for b in &batch_of {
            *batch_sizes.entry(b).or_default() += 1;
        }
        if batch_sizes.len() < 2 {
            return Err(Error::InsufficientBatches(format!(
                "condition {cond} has samples from {} batch(es)",
                batch_sizes.len()
            )));
        }
        let n_c = idx.len();
        if k >= n_c {
            return Err(Error::InvalidParameter(format!(
                "k = {k} must be below the {n_c} samples of condition {cond}"
            )));
        }
        let observed: Vec<f64> = (0..n_c)
            .into_par_iter()
            .map(|a| {
                let mut dist: Vec<(f64, usize)> = (0..n_c)
                    .filter(|&b| b != a)
                    .map(|b| {
                        let d2: f64 = (0..dims)
                            .map(|c| (scores[[idx[a], c]] - scores[[idx[b], c]]).powi(2))
                            .sum();
                        (d2, b)
                    })
                    .collect();
                dist.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                let other = dist[..k].iter().filter(|(_, b)| batch_of[*b] != batch_of[a]).count();
                other as f64 / k as f64
            })
            .collect();
        let expected: f64 = batch_of
            .iter()
            .map(|b| (n_c - batch_sizes[b]) as f64 / (n_c - 1) as f64)
            .sum::<f64>()
            / n_c as f64;
        let mean_obs = observed.iter().sum::<f64>() / n_c as f64;
        let score = (0.5 * mean_obs / expected).clamp(0.0, 1.0);
        per_condition.push(ConditionMixture {
            condition: cond,
            score,
            n_samples: n_c,
        });
    }
    if per_condition.is_empty() {
        return Err(Error::InsufficientSamples("no samples".into()));
    }
    let mean_score = per_condition.iter().map(|c| c.score).sum::<f64>() / per_condition.len() as f64;
    Ok(MixtureScoreReport {
        per_condition,
        mean_score,
        k,
        dims,
    })
}

/// Sample-size-corrected bimodality coefficient; `None` for fewer than four
/// values or zero variance.
pub fn bimodality_coefficient(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 4 {
        return None;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if m2 <= f64::EPSILON * mean.abs().max(1.0) * f64::EPSILON {
        return None;
    }
    let g1 = m3 / m2.powf(1.5);
    let g2 = m4 / (m2 * m2) - 3.0;
    let skew = (nf * (nf - 1.0)).sqrt() / (nf - 2.0) * g1;
    let kurt = (nf - 1.0) / ((nf - 2.0) * (nf - 3.0)) * ((nf + 1.0) * g2 + 6.0);
    Some((skew * skew + 1.0) / (kurt + 3.0 * (nf - 1.0).powi(2) / ((nf - 2.0) * (nf - 3.0))))
}

/// Genes whose bimodality coefficient exceeds `threshold`, highest first.
pub fn multimodality_screen(m: &ExpressionMatrix, threshold: f64) -> Vec<(String, f64)> {
    let mut flagged: Vec<(String, f64)> = m
        .gene_ids()
        .par_iter()
        .zip(m.values().outer_iter().collect::<Vec<_>>())
        .filter_map(|(g, row)| {
            let bc = bimodality_coefficient(&row.to_vec())?;
            (bc > threshold).then(|| (g.clone(), bc))
        })
        .collect();
    flagged.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    flagged
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPairCheck {
    pub batch_a: String,
    pub batch_b: String,
    pub significant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBatchCheck {
    pub condition: Condition,
    /// Genes significant in at least one batch pair.
    pub significant_genes: usize,
    pub pairs: Vec<BatchPairCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossBatchReport {
    pub fdr: f64,
    pub n_genes: usize,
    pub per_condition: Vec<ConditionBatchCheck>,
}

impl CrossBatchReport {
    pub fn total_significant(&self) -> usize {
        self.per_condition.iter().map(|c| c.significant_genes).sum()
    }
}

/// Within each condition, test every pair of batches gene by gene.
pub fn cross_batch_dea_check(d: &Dataset, fdr: f64) -> Result<CrossBatchReport> {
    let mut per_condition = Vec::new();
    for cond in [Condition::Control, Condition::Case] {
        let mut by_batch: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (j, md) in d.metadata().iter().enumerate() {
            if md.condition == cond {
                by_batch.entry(md.batch.as_str()).or_default().push(j);
            }
        }
        if by_batch.is_empty() {
            continue;
        }
        if by_batch.len() < 2 {
            return Err(Error::InsufficientSamples(format!(
                "condition {cond} is present in a single batch"
            )));
        }
        let batches: Vec<(&str, Vec<usize>)> = by_batch.into_iter().collect();
        let mut pairs = Vec::new();
        let mut hit: BTreeSet<String> = BTreeSet::new();
        for a in 0..batches.len() {
            for b in a + 1..batches.len() {
                let res = dea::test_columns(d.matrix(), &batches[a].1, &batches[b].1, fdr)?;
                let sig = res.significant_genes();
                pairs.push(BatchPairCheck {
                    batch_a: batches[a].0.to_string(),
                    batch_b: batches[b].0.to_string(),
                    significant: sig.len(),
                });
                hit.extend(sig);
            }
        }
        per_condition.push(ConditionBatchCheck {
            condition: cond,
            significant_genes: hit.len(),
            pairs,
        });
    }
    Ok(CrossBatchReport {
        fdr,
        n_genes: d.matrix().n_genes(),
        per_condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleMetadata;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn matrix(values: Array2<f64>) -> ExpressionMatrix {
        let (g, s) = values.dim();
        ExpressionMatrix::new(
            (0..g).map(|i| format!("g{i:04}")).collect(),
            (0..s).map(|i| format!("s{i:04}")).collect(),
            values,
        )
        .unwrap()
    }

    fn dataset(values: Array2<f64>, batch: impl Fn(usize) -> String, cond: impl Fn(usize) -> Condition) -> Dataset {
        let m = matrix(values);
        let md = (0..m.n_samples())
            .map(|j| SampleMetadata {
                sample_id: m.sample_ids()[j].clone(),
                subject_id: format!("p{j}"),
                batch: batch(j),
                condition: cond(j),
            })
            .collect();
        Dataset::new(m, md).unwrap()
    }

    #[test]
    fn rank_one_line() {
        let v = Array2::from_shape_fn((2, 30), |(g, i)| (i as f64) * if g == 0 { 1.0 } else { -2.0 } + 3.0);
        let p = pca(&matrix(v), 1).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-10);
        assert_eq!(p.rank, 1);
        assert!(matches!(
            pca(
                &matrix(Array2::from_shape_fn((2, 30), |(g, i)| i as f64 * (g + 1) as f64)),
                2
            ),
            Err(Error::RankDeficiency { rank: 1, .. })
        ));
        // largest-magnitude loading is positive
        let l = p.loadings.column(0);
        let pivot = if l[0].abs() > l[1].abs() { l[0] } else { l[1] };
        assert!(pivot > 0.0);
    }

    #[test]
    fn isotropic_gaussian_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v = Array2::from_shape_fn((3, 10_000), |_| StandardNormal.sample(&mut rng));
        let p = pca(&matrix(v), 3).unwrap();
        for r in &p.explained_variance_ratio {
            assert!((r - 1.0 / 3.0).abs() < 0.02, "{r}");
        }
    }

    #[test]
    fn full_rank_ratios_and_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let v = Array2::from_shape_fn((8, 12), |_| rng.random::<f64>() * 5.0);
        let m = matrix(v.clone());
        let p = pca(&m, 8).unwrap();
        let sum: f64 = p.explained_variance_ratio.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for w in p.explained_variance_ratio.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let rec = p.reconstruct_centered();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..12 {
            for g in 0..8 {
                let c = v[[g, i]] - p.center[g];
                num += (rec[[i, g]] - c).powi(2);
                den += c * c;
            }
        }
        assert!((num / den).sqrt() < 1e-8);
    }

    #[test]
    fn mixture_ideal_and_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 400;
        let v = Array2::from_shape_fn((20, n), |_| StandardNormal.sample(&mut rng));
        let d = dataset(
            v,
            |j| format!("b{}", j % 2),
            |j| {
                if (j / 2) % 2 == 0 {
                    Condition::Control
                } else {
                    Condition::Case
                }
            },
        );
        let r = mixture_score(&d, DEFAULT_MIXTURE_K).unwrap();
        assert!((r.mean_score - 0.5).abs() < 0.05, "{r:?}");

        let v = Array2::from_shape_fn((20, n), |(_, j)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e + if j % 2 == 0 { 0.0 } else { 50.0 }
        });
        let d = dataset(
            v,
            |j| format!("b{}", j % 2),
            |j| {
                if (j / 2) % 2 == 0 {
                    Condition::Control
                } else {
                    Condition::Case
                }
            },
        );
        let r = mixture_score(&d, DEFAULT_MIXTURE_K).unwrap();
        assert!(r.mean_score <= 0.02, "{r:?}");
    }

    #[test]
    fn mixture_relabel_invariant_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let v = Array2::from_shape_fn((10, 120), |(_, j)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e + (j % 3) as f64 * 0.7
        });
        let a = dataset(
            v.clone(),
            |j| format!("b{}", j % 3),
            |j| if j < 60 { Condition::Control } else { Condition::Case },
        );
        let b = dataset(
            v.clone(),
            |j| ["zz", "aa", "mm"][j % 3].to_string(),
            |j| if j < 60 { Condition::Control } else { Condition::Case },
        );
        assert_eq!(mixture_score(&a, 10).unwrap(), mixture_score(&b, 10).unwrap());
        assert!(mixture_score(&a, 60).is_err());
        let single = dataset(
            v,
            |j| if j < 60 { "x".into() } else { "y".into() },
            |j| if j < 60 { Condition::Control } else { Condition::Case },
        );
        assert!(matches!(mixture_score(&single, 10), Err(Error::InsufficientBatches(_))));
    }

    #[test]
    fn bimodality_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let uniform: Vec<f64> = (0..200_000).map(|_| rng.random::<f64>()).collect();
        assert!((bimodality_coefficient(&uniform).unwrap() - 5.0 / 9.0).abs() < 0.02);
        let normal: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!((bimodality_coefficient(&normal).unwrap() - 1.0 / 3.0).abs() < 0.02);
        let left = Normal::new(-3.0, 1.0).unwrap();
        let right = Normal::new(3.0, 1.0).unwrap();
        let mix: Vec<f64> = (0..20_000)
            .map(|i| {
                if i % 2 == 0 {
                    left.sample(&mut rng)
                } else {
                    right.sample(&mut rng)
                }
            })
            .collect();
        assert!(bimodality_coefficient(&mix).unwrap() > 5.0 / 9.0);
        assert_eq!(bimodality_coefficient(&[1.0, 2.0, 3.0]), None);
        assert_eq!(bimodality_coefficient(&[2.0; 10]), None);
    }

    #[test]
    fn bimodality_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..50 {
            let v: Vec<f64> = (0..40).map(|_| rng.random::<f64>().powi(3)).collect();
            let w: Vec<f64> = v.iter().map(|x| -3.5 * x + 10.0).collect();
            let (a, b) = (bimodality_coefficient(&v).unwrap(), bimodality_coefficient(&w).unwrap());
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn screen_flags_bimodal_genes() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let v = Array2::from_shape_fn((6, 400), |(g, j)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            if g < 2 {
                e + if j % 2 == 0 { -4.0 } else { 4.0 }
            } else {
                e
            }
        });
        let flagged = multimodality_screen(&matrix(v), BIMODALITY_THRESHOLD);
        let genes: BTreeSet<&str> = flagged.iter().map(|(g, _)| g.as_str()).collect();
        assert_eq!(genes, BTreeSet::from(["g0000", "g0001"]));
        assert!(flagged[0].1 >= flagged[1].1);
    }

    #[test]
    fn cross_batch_null_and_planted() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let n = 120;
        let batch = |j: usize| format!("b{}", j % 2);
        let cond = |j: usize| {
            if (j / 2).is_multiple_of(2) {
                Condition::Control
            } else {
                Condition::Case
            }
        };
        let null = Array2::from_shape_fn((500, n), |_| StandardNormal.sample(&mut rng));
        let r = cross_batch_dea_check(&dataset(null, batch, cond), 0.05).unwrap();
        assert!(r.total_significant() <= 2, "{r:?}");

        let planted = Array2::from_shape_fn((500, n), |(g, j)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e + if g < 50 && j % 2 == 1 { 2.0 } else { 0.0 }
        });
        let r = cross_batch_dea_check(&dataset(planted, batch, cond), 0.05).unwrap();
        for c in &r.per_condition {
            assert!(c.significant_genes >= 45, "{c:?}");
        }
    }
}
