//! Wilcoxon rank-sum differential expression with Benjamini-Hochberg FDR,
//! and set comparison against model-derived gene lists.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{Condition, Dataset, ExpressionMatrix};
use crate::error::{Error, Result};
use crate::stats::{self, midranks};

/// Exact enumeration is used for tie-free inputs at or below this total size.
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    Exact,
    Normal,
    /// Every pooled value identical; p set to 1.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumTest {
    /// Rank sum of the first group, midranks for ties.
    pub statistic: f64,
    pub p_value: f64,
    pub method: PMethod,
}

/// Two-sided Wilcoxon rank-sum test of `a` against `b`.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientSamples(
            "rank-sum test needs both groups non-empty".into(),
        ));
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, tie_term) = midranks(&pooled);
    let w: f64 = ranks[..na].iter().sum();

    if tie_term == (n * n * n - n) as f64 {
        return Ok(RankSumTest {
            statistic: w,
            p_value: 1.0,
            method: PMethod::Degenerate,
        });
    }

    if n <= EXACT_MAX_N && tie_term == 0.0 {
        let counts = rank_sum_distribution(na, n);
        let total: f64 = counts.iter().sum();
        let w_int = w.round() as usize;
        let lower: f64 = counts[..=w_int].iter().sum::<f64>() / total;
        let upper: f64 = counts[w_int..].iter().sum::<f64>() / total;
        return Ok(RankSumTest {
            statistic: w,
            p_value: (2.0 * lower.min(upper)).min(1.0),
            method: PMethod::Exact,
        });
    }

    let (na_f, nb_f, n_f) = (na as f64, nb as f64, n as f64);
    let u = w - na_f * (na_f + 1.0) / 2.0;
    let mean = na_f * nb_f / 2.0;
    let var = na_f * nb_f / 12.0 * ((n_f + 1.0) - tie_term / (n_f * (n_f - 1.0)));
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(RankSumTest {
        statistic: w,
        p_value: erfc(z / std::f64::consts::SQRT_2).min(1.0),
        method: PMethod::Normal,
    })
}

/// Number of size-`k` subsets of {1..n} with each possible sum (index = sum).
fn rank_sum_distribution(k: usize, n: usize) -> Vec<f64> {
    let max_sum = n * (n + 1) / 2;
    // ways[j][s]: subsets of size j with sum s
    let mut ways = vec![vec![0.0f64; max_sum + 1]; k + 1];
    ways[0][0] = 1.0;
    for r in 1..=n {
        for j in (1..=k.min(r)).rev() {
            for s in (r..=max_sum).rev() {
                ways[j][s] += ways[j - 1][s - r];
            }
        }
    }
    ways.swap_remove(k)
}

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn benjamini_hochberg(pvalues: &[f64]) -> Result<Vec<f64>> {
    if let Some(&bad) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidPValue(bad));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| stats::cmp_f64(&pvalues[a], &pvalues[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        let rank = pos + 1;
        running = running.min(pvalues[i] * (m as f64 / rank as f64));
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneTest {
    pub gene: String,
    pub statistic: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    /// Sign of median(case) − median(control): -1, 0 or 1.
    pub direction: i8,
    pub significant: bool,
    pub method: PMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeaResult {
    pub fdr: f64,
    /// Sorted by gene ID.
    pub genes: Vec<GeneTest>,
}

impl DeaResult {
    pub fn significant_genes(&self) -> BTreeSet<String> {
        self.genes
            .iter()
            .filter(|t| t.significant)
            .map(|t| t.gene.clone())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["gene", "stat", "p", "p_adj", "direction", "significant"])?;
        for t in &self.genes {
            wtr.write_record([
                t.gene.clone(),
                t.statistic.to_string(),
                t.p_value.to_string(),
                t.p_adjusted.to_string(),
                t.direction.to_string(),
                t.significant.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<dea writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, fdr: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut genes = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k).unwrap_or("").parse().map_err(|_| Error::Parse {
                    row: i + 2,
                    col: k + 1,
                    message: "expected a number".into(),
                })
            };
            genes.push(GeneTest {
                gene: rec.get(0).unwrap_or("").to_string(),
                statistic: num(1)?,
                p_value: num(2)?,
                p_adjusted: num(3)?,
                direction: num(4)? as i8,
                significant: rec.get(5) == Some("true"),
                method: PMethod::Normal,
            });
        }
        Ok(Self { fdr, genes })
    }
}

/// Per-gene test of columns `group_a` against `group_b`, BH-adjusted across genes.
pub fn test_columns(m: &ExpressionMatrix, group_a: &[usize], group_b: &[usize], fdr: f64) -> Result<DeaResult> {
    let tests: Vec<(RankSumTest, i8)> = m
        .values()
        .outer_iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|row| {
            let a: Vec<f64> = group_a.iter().map(|&j| row[j]).collect();
            let b: Vec<f64> = group_b.iter().map(|&j| row[j]).collect();
            let t = wilcoxon_rank_sum(&a, &b)?;
            let diff = stats::median(&a) - stats::median(&b);
            let dir = if diff > 0.0 {
                1
            } else if diff < 0.0 {
                -1
            } else {
                0
            };
            Ok((t, dir))
        })
        .collect::<Result<_>>()?;
    let raw: Vec<f64> = tests.iter().map(|(t, _)| t.p_value).collect();
    let adjusted = benjamini_hochberg(&raw)?;
    let mut genes: Vec<GeneTest> = m
        .gene_ids()
        .iter()
        .zip(tests)
        .zip(adjusted)
        .map(|((g, (t, dir)), padj)| GeneTest {
            gene: g.clone(),
            statistic: t.statistic,
            p_value: t.p_value,
            p_adjusted: padj,
            direction: dir,
            significant: padj < fdr,
            method: t.method,
        })
        .collect();
    genes.sort_by(|a, b| a.gene.cmp(&b.gene));
    Ok(DeaResult { fdr, genes })
}

/// Case versus Control for every gene.
pub fn differential_expression(d: &Dataset, fdr: f64) -> Result<DeaResult> {
    let (mut case, mut control) = (Vec::new(), Vec::new());
    for (j, c) in d.conditions().iter().enumerate() {
        match c {
            Condition::Case => case.push(j),
            Condition::Control => control.push(j),
        }
    }
    if case.is_empty() || control.is_empty() {
        return Err(Error::SingleClass);
    }
    test_columns(d.matrix(), &case, &control, fdr)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VennCounts {
    pub shap_only: usize,
    pub overlap: usize,
    pub dea_only: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetComparison {
    pub shap_only: BTreeSet<String>,
    pub overlap: BTreeSet<String>,
    pub dea_only: BTreeSet<String>,
    pub counts: VennCounts,
}

pub fn compare_sets(shap_genes: &BTreeSet<String>, dea_genes: &BTreeSet<String>) -> SetComparison {
    let shap_only: BTreeSet<String> = shap_genes.difference(dea_genes).cloned().collect();
    let overlap: BTreeSet<String> = shap_genes.intersection(dea_genes).cloned().collect();
    let dea_only: BTreeSet<String> = dea_genes.difference(shap_genes).cloned().collect();
    let counts = VennCounts {
        shap_only: shap_only.len(),
        overlap: overlap.len(),
        dea_only: dea_only.len(),
    };
    SetComparison {
        shap_only,
        overlap,
        dea_only,
        counts,
    }
}
