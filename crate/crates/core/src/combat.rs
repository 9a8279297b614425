//! Parametric empirical-Bayes batch correction (ComBat).
//!
//! Data are standardized gene-wise against a least-squares fit of batch and
//! (optionally) condition effects, per-batch location/scale estimates are
//! shrunk toward Normal / inverse-gamma priors fitted across genes, and the
//! shrunk effects are removed before the covariate signal is added back.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Condition, Dataset, ExpressionMatrix};
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    None,
    #[default]
    Condition,
}

impl std::str::FromStr for Covariate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Covariate::None),
            "condition" => Ok(Covariate::Condition),
            other => Err(Error::InvalidParameter(format!("unknown covariate '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombatOptions {
    pub covariate: Covariate,
    /// Maximum absolute change in gamma* and delta²* that counts as converged.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Test hook: a single batch fits an identity model instead of failing.
    pub allow_single_batch: bool,
}

impl Default for CombatOptions {
    fn default() -> Self {
        Self {
            covariate: Covariate::Condition,
            tolerance: 1e-4,
            max_iterations: 200,
            allow_single_batch: false,
        }
    }
}

/// Hyperparameters of the per-batch priors: gamma ~ N(gamma_bar, tau2),
/// delta² ~ InvGamma(lambda, theta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchPrior {
    pub gamma_bar: f64,
    pub tau2: f64,
    pub lambda: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombatModel {
    pub genes: Vec<String>,
    pub batches: Vec<String>,
    /// Covariate actually used; `none` when only one condition was present.
    pub covariate: Covariate,
    pub alpha: Vec<f64>,
    /// Condition (Case) coefficient per gene; zeros when no covariate.
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Indexed `[batch][gene]`.
    pub gamma_hat: Vec<Vec<f64>>,
    pub delta2_hat: Vec<Vec<f64>>,
    pub gamma_star: Vec<Vec<f64>>,
    pub delta2_star: Vec<Vec<f64>>,
    pub priors: Vec<BatchPrior>,
    /// Genes with zero pooled variance, returned uncorrected.
    pub passthrough: Vec<String>,
    /// Largest iteration count over genes, per batch.
    pub iterations: Vec<usize>,
}

/// Result of the per-gene fixed-point iteration.
#[derive(Debug, Clone)]
pub(crate) struct EbSolution {
    pub gamma: f64,
    pub delta2: f64,
    pub changes: Vec<f64>,
}

pub(crate) fn eb_solve(
    z: &[f64],
    gamma_hat: f64,
    delta2_hat: f64,
    prior: &BatchPrior,
    tolerance: f64,
    max_iterations: usize,
) -> Result<EbSolution> {
    let n = z.len() as f64;
    let (mut g_old, mut d_old) = (gamma_hat, delta2_hat);
    let mut changes = Vec::new();
    for _ in 0..max_iterations {
        let g_new = (n * prior.tau2 * gamma_hat + d_old * prior.gamma_bar) / (n * prior.tau2 + d_old);
        let sum2: f64 = z.iter().map(|&v| (v - g_new) * (v - g_new)).sum();
        let d_new = (prior.theta + 0.5 * sum2) / (n / 2.0 + prior.lambda - 1.0);
        let change = (g_new - g_old).abs().max((d_new - d_old).abs());
        changes.push(change);
        g_old = g_new;
        d_old = d_new;
        if change < tolerance {
            return Ok(EbSolution {
                gamma: g_new,
                delta2: d_new,
                changes,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iterations,
    })
}

/// Method-of-moments prior fit across genes for one batch.
fn fit_prior(gamma_hat: &[f64], delta2_hat: &[f64]) -> BatchPrior {
    let gamma_bar = stats::mean(gamma_hat.iter().copied());
    let tau2 = stats::variance(gamma_hat.iter().copied());
    let m = stats::mean(delta2_hat.iter().copied());
    let v = stats::variance(delta2_hat.iter().copied()).max(1e-12);
    BatchPrior {
        gamma_bar,
        tau2,
        lambda: (m * m + 2.0 * v) / v,
        theta: (m * m * m + m * v) / v,
    }
}

struct Design {
    batch_of: Vec<usize>,
    case: Option<Vec<f64>>,
}

fn design(d: &Dataset, covariate: Covariate, batches: &[String]) -> Result<Design> {
    let batch_of = d
        .metadata()
        .iter()
        .map(|m| {
            batches
                .iter()
                .position(|b| *b == m.batch)
                .ok_or_else(|| Error::UnknownBatch(m.batch.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let case = match covariate {
        Covariate::None => None,
        Covariate::Condition => Some(
            d.conditions()
                .iter()
                .map(|c| if *c == Condition::Case { 1.0 } else { 0.0 })
                .collect(),
        ),
    };
    Ok(Design { batch_of, case })
}

impl CombatModel {
    pub fn fit(d: &Dataset, options: &CombatOptions) -> Result<Self> {
        let batches = d.batches();
        let n = d.matrix().n_samples();
        let n_genes = d.matrix().n_genes();
        if batches.len() < 2 && !options.allow_single_batch {
            return Err(Error::InsufficientBatches(format!(
                "batch correction needs at least two batches, found {}",
                batches.len()
            )));
        }
        let sizes: Vec<usize> = d.batch_columns().values().map(Vec::len).collect();
        if let Some((b, _)) = batches.iter().zip(&sizes).find(|(_, &s)| s < 2) {
            return Err(Error::InsufficientSamples(format!(
                "batch '{b}' has fewer than two samples"
            )));
        }

        let conditions = d.conditions();
        let both_conditions = conditions.contains(&Condition::Control) && conditions.contains(&Condition::Case);
        let covariate = if both_conditions {
            options.covariate
        } else {
            Covariate::None
        };
        let des = design(d, covariate, &batches)?;
        let n_batch = batches.len();
        let p = n_batch + usize::from(des.case.is_some());

        let x = DMatrix::from_fn(n, p, |j, c| {
            if c < n_batch {
                f64::from(u8::from(des.batch_of[j] == c))
            } else {
                des.case.as_ref().map_or(0.0, |v| v[j])
            }
        });
        let xtx = x.transpose() * &x;
        let eig = SymmetricEigen::new(xtx.clone());
        let max_ev = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let min_ev = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min_ev <= 1e-10 * max_ev {
            return Err(Error::SingularDesign(
                "condition is confounded with batch membership".into(),
            ));
        }
        let chol = xtx
            .cholesky()
            .ok_or_else(|| Error::SingularDesign("normal equations not positive definite".into()))?;
        let y = DMatrix::from_fn(n, n_genes, |j, g| d.matrix().values()[[g, j]]);
        let coef = chol.solve(&(x.transpose() * &y));
        let fitted = &x * &coef;

        let mut alpha = vec![0.0; n_genes];
        let mut beta = vec![0.0; n_genes];
        let mut sigma = vec![1.0; n_genes];
        let mut passthrough_mask = vec![false; n_genes];
        for g in 0..n_genes {
            alpha[g] = (0..n_batch).map(|b| sizes[b] as f64 / n as f64 * coef[(b, g)]).sum();
            if des.case.is_some() {
                beta[g] = coef[(n_batch, g)];
            }
            let var_pooled = (0..n).map(|j| (y[(j, g)] - fitted[(j, g)]).powi(2)).sum::<f64>() / n as f64;
            let scale = alpha[g].abs().max(1.0);
            if var_pooled <= (1e-10 * scale).powi(2) {
                passthrough_mask[g] = true;
            } else {
                sigma[g] = var_pooled.sqrt();
            }
        }

        let model_partial = CombatModel {
            genes: d.matrix().gene_ids().to_vec(),
            batches: batches.clone(),
            covariate,
            alpha,
            beta,
            sigma,
            gamma_hat: Vec::new(),
            delta2_hat: Vec::new(),
            gamma_star: Vec::new(),
            delta2_star: Vec::new(),
            priors: Vec::new(),
            passthrough: Vec::new(),
            iterations: Vec::new(),
        };
        let z = model_partial.standardize(d, &des);
        let active: Vec<usize> = (0..n_genes).filter(|&g| !passthrough_mask[g]).collect();
        if active.len() < 2 && n_batch > 1 {
            return Err(Error::DegenerateInput(
                "batch correction needs at least two genes with non-zero variance".into(),
            ));
        }

        let batch_cols = d.batch_columns();
        let mut model = model_partial;
        model.passthrough = (0..n_genes)
            .filter(|&g| passthrough_mask[g])
            .map(|g| model.genes[g].clone())
            .collect();
        for cols in batch_cols.values() {
            let rows: Vec<Vec<f64>> = (0..n_genes).map(|g| cols.iter().map(|&j| z[g][j]).collect()).collect();
            let g_hat: Vec<f64> = rows.iter().map(|r| stats::mean(r.iter().copied())).collect();
            let d_hat: Vec<f64> = rows.iter().map(|r| stats::variance(r.iter().copied())).collect();

            if n_batch == 1 {
                model.gamma_hat.push(g_hat);
                model.delta2_hat.push(d_hat);
                model.gamma_star.push(vec![0.0; n_genes]);
                model.delta2_star.push(vec![1.0; n_genes]);
                model.priors.push(BatchPrior {
                    gamma_bar: 0.0,
                    tau2: 0.0,
                    lambda: 0.0,
                    theta: 0.0,
                });
                model.iterations.push(0);
                continue;
            }

            let prior = fit_prior(
                &active.iter().map(|&g| g_hat[g]).collect::<Vec<_>>(),
                &active.iter().map(|&g| d_hat[g]).collect::<Vec<_>>(),
            );
            let solved: Vec<Option<EbSolution>> = (0..n_genes)
                .into_par_iter()
                .map(|g| {
                    if passthrough_mask[g] {
                        Ok(None)
                    } else {
                        eb_solve(
                            &rows[g],
                            g_hat[g],
                            d_hat[g],
                            &prior,
                            options.tolerance,
                            options.max_iterations,
                        )
                        .map(Some)
                    }
                })
                .collect::<Result<_>>()?;
            model
                .iterations
                .push(solved.iter().flatten().map(|s| s.changes.len()).max().unwrap_or(0));
            model
                .gamma_star
                .push(solved.iter().map(|s| s.as_ref().map_or(0.0, |s| s.gamma)).collect());
            model
                .delta2_star
                .push(solved.iter().map(|s| s.as_ref().map_or(1.0, |s| s.delta2)).collect());
            model.gamma_hat.push(g_hat);
            model.delta2_hat.push(d_hat);
            model.priors.push(prior);
        }
        Ok(model)
    }

    /// `Z = (Y − alpha − x·beta) / sigma`, indexed `[gene][sample]`.
    fn standardize(&self, d: &Dataset, des: &Design) -> Vec<Vec<f64>> {
        let v = d.matrix().values();
        (0..self.genes.len())
            .map(|g| {
                (0..d.matrix().n_samples())
                    .map(|j| {
                        let mean = self.alpha[g] + des.case.as_ref().map_or(0.0, |c| c[j] * self.beta[g]);
                        (v[[g, j]] - mean) / self.sigma[g]
                    })
                    .collect()
            })
            .collect()
    }

    /// Remove the fitted batch effects from `d`.
    pub fn apply(&self, d: &Dataset) -> Result<ExpressionMatrix> {
        if d.matrix().gene_ids() != self.genes.as_slice() {
            return Err(Error::Shape("dataset genes differ from the fitted model".into()));
        }
        let des = design(d, self.covariate, &self.batches)?;
        let z = self.standardize(d, &des);
        let passthrough: std::collections::HashSet<&str> = self.passthrough.iter().map(String::as_str).collect();
        let mut out = d.matrix().values().clone();
        for (g, gene) in self.genes.iter().enumerate() {
            if passthrough.contains(gene.as_str()) {
                continue;
            }
            for (j, &b) in des.batch_of.iter().enumerate() {
                let mean = self.alpha[g] + des.case.as_ref().map_or(0.0, |c| c[j] * self.beta[g]);
                let adjusted = (z[g][j] - self.gamma_star[b][g]) / self.delta2_star[b][g].sqrt();
                out[[g, j]] = self.sigma[g] * adjusted + mean;
            }
        }
        d.matrix().with_values(out)
    }

    pub fn batch_names(&self) -> &[String] {
        &self.batches
    }
}

pub fn combat_fit(d: &Dataset, options: &CombatOptions) -> Result<CombatModel> {
    CombatModel::fit(d, options)
}

pub fn combat_apply(d: &Dataset, model: &CombatModel) -> Result<ExpressionMatrix> {
    model.apply(d)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::data::SampleMetadata;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dataset(values: Array2<f64>, batches: &[&str], conditions: &[Condition]) -> Dataset {
        let (g, s) = values.dim();
        let m = ExpressionMatrix::new(
            (0..g).map(|i| format!("g{i:03}")).collect(),
            (0..s).map(|i| format!("s{i:03}")).collect(),
            values,
        )
        .unwrap();
        let md = (0..s)
            .map(|j| SampleMetadata {
                sample_id: format!("s{j:03}"),
                subject_id: format!("p{j:03}"),
                batch: batches[j].to_string(),
                condition: conditions[j],
            })
            .collect();
        Dataset::new(m, md).unwrap()
    }

    fn no_covariate() -> CombatOptions {
        CombatOptions {
            covariate: Covariate::None,
            ..Default::default()
        }
    }

    /// Direct transcription of the standardization and fixed-point updates.
    #[test]
    fn shifted_batch_matches_fixed_point_oracle() {
        let base = [
            [1.0, 2.5, 0.3, 1.7, 2.2],
            [5.0, 4.1, 6.3, 5.5, 4.4],
            [-1.0, 0.4, -0.2, 0.9, -0.6],
        ];
        let c = [2.0, -1.0, 0.5];
        let mut values = Array2::zeros((3, 10));
        for g in 0..3 {
            for j in 0..5 {
                values[[g, j]] = base[g][j];
                values[[g, j + 5]] = base[g][j] + c[g];
            }
        }
        let batches: Vec<&str> = (0..10).map(|j| if j < 5 { "a" } else { "b" }).collect();
        let d = dataset(values.clone(), &batches, &[Condition::Control; 10]);
        let opts = CombatOptions {
            tolerance: 1e-10,
            max_iterations: 10_000,
            ..no_covariate()
        };
        let model = CombatModel::fit(&d, &opts).unwrap();

        for g in 0..3 {
            let row: Vec<f64> = values.row(g).to_vec();
            let mean_a = row[..5].iter().sum::<f64>() / 5.0;
            let mean_b = row[5..].iter().sum::<f64>() / 5.0;
            let alpha = 0.5 * mean_a + 0.5 * mean_b;
            let var = row[..5].iter().map(|v| (v - mean_a).powi(2)).sum::<f64>() / 10.0
                + row[5..].iter().map(|v| (v - mean_b).powi(2)).sum::<f64>() / 10.0;
            let sigma = var.sqrt();
            assert!((model.alpha[g] - alpha).abs() < 1e-10);
            assert!((model.sigma[g] - sigma).abs() < 1e-10);
            let diff = model.gamma_hat[1][g] - model.gamma_hat[0][g];
            assert!((diff - c[g] / sigma).abs() < 1e-10);
        }

        for b in 0..2 {
            let gh = &model.gamma_hat[b];
            let dh = &model.delta2_hat[b];
            let gbar = gh.iter().sum::<f64>() / 3.0;
            let t2 = gh.iter().map(|x| (x - gbar).powi(2)).sum::<f64>() / 2.0;
            let m = dh.iter().sum::<f64>() / 3.0;
            let v = dh.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 2.0;
            let lambda = (m * m + 2.0 * v) / v;
            let theta = (m * m * m + m * v) / v;
            for g in 0..3 {
                let sigma = model.sigma[g];
                let z: Vec<f64> = (0..5)
                    .map(|k| {
                        let j = b * 5 + k;
                        (values[[g, j]] - model.alpha[g]) / sigma
                    })
                    .collect();
                let (mut gs, mut ds) = (gh[g], dh[g]);
                for _ in 0..100_000 {
                    let gn = (5.0 * t2 * gh[g] + ds * gbar) / (5.0 * t2 + ds);
                    let s2: f64 = z.iter().map(|x| (x - gn).powi(2)).sum();
                    let dn = (theta + 0.5 * s2) / (2.5 + lambda - 1.0);
                    let done = (gn - gs).abs() < 1e-14 && (dn - ds).abs() < 1e-14;
                    gs = gn;
                    ds = dn;
                    if done {
                        break;
                    }
                }
                assert!((model.gamma_star[b][g] - gs).abs() < 1e-8, "gamma b{b} g{g}");
                assert!((model.delta2_star[b][g] - ds).abs() < 1e-8, "delta b{b} g{g}");
                // shrinkage toward the prior mean
                assert!((model.gamma_star[b][g] - gbar).abs() <= (gh[g] - gbar).abs() + 1e-12);
            }
        }
    }

    #[test]
    fn single_batch_rejected_unless_hook() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = Array2::from_shape_fn((20, 8), |_| StandardNormal.sample(&mut rng));
        let conds: Vec<Condition> = (0..8)
            .map(|j| {
                if j % 2 == 0 {
                    Condition::Case
                } else {
                    Condition::Control
                }
            })
            .collect();
        let d = dataset(values.clone(), &["only"; 8], &conds);
        assert!(matches!(
            CombatModel::fit(&d, &CombatOptions::default()),
            Err(Error::InsufficientBatches(_))
        ));
        let hook = CombatOptions {
            allow_single_batch: true,
            ..Default::default()
        };
        let model = CombatModel::fit(&d, &hook).unwrap();
        let out = model.apply(&d).unwrap();
        for (a, b) in out.values().iter().zip(values.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn confounded_design_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values = Array2::from_shape_fn((10, 8), |_| StandardNormal.sample(&mut rng));
        let batches: Vec<&str> = (0..8).map(|j| if j < 4 { "a" } else { "b" }).collect();
        let conds: Vec<Condition> = (0..8)
            .map(|j| if j < 4 { Condition::Control } else { Condition::Case })
            .collect();
        let d = dataset(values, &batches, &conds);
        assert!(matches!(
            CombatModel::fit(&d, &CombatOptions::default()),
            Err(Error::SingularDesign(_))
        ));
        assert!(CombatModel::fit(&d, &no_covariate()).is_ok());
    }

    #[test]
    fn unknown_batch_on_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values = Array2::from_shape_fn((10, 6), |_| StandardNormal.sample(&mut rng));
        let batches = ["a", "a", "a", "b", "b", "b"];
        let d = dataset(values.clone(), &batches, &[Condition::Control; 6]);
        let model = CombatModel::fit(&d, &no_covariate()).unwrap();
        let other = dataset(values, &["a", "a", "a", "c", "c", "c"], &[Condition::Control; 6]);
        assert!(matches!(model.apply(&other), Err(Error::UnknownBatch(ref b)) if b == "c"));
    }

    #[test]
    fn constant_gene_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut values = Array2::from_shape_fn((10, 6), |_| StandardNormal.sample(&mut rng));
        values.row_mut(3).fill(7.0);
        let d = dataset(values, &["a", "a", "a", "b", "b", "b"], &[Condition::Control; 6]);
        let model = CombatModel::fit(&d, &no_covariate()).unwrap();
        assert_eq!(model.passthrough, vec!["g003".to_string()]);
        let out = model.apply(&d).unwrap();
        assert!(out.values().row(3).iter().all(|&v| v == 7.0));
        assert!(out.values().iter().all(|v| v.is_finite()));
        assert!(model.sigma.iter().all(|&s| s > 0.0));
        assert!(model.delta2_star.iter().flatten().all(|&d| d > 0.0));
    }

    #[test]
    fn null_batches_shrink_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values = Array2::from_shape_fn((2000, 20), |_| StandardNormal.sample(&mut rng));
        let batches: Vec<&str> = (0..20).map(|j| if j < 10 { "a" } else { "b" }).collect();
        let d = dataset(values, &batches, &[Condition::Control; 20]);
        let model = CombatModel::fit(&d, &no_covariate()).unwrap();
        for b in 0..2 {
            let hat = stats::mean(model.gamma_hat[b].iter().map(|v| v.abs()));
            let star = stats::mean(model.gamma_star[b].iter().map(|v| v.abs()));
            assert!(star < hat, "batch {b}: {star} !< {hat}");
        }
    }

    #[test]
    fn eb_changes_contract_after_warmup() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..20 {
            let n_genes = 200;
            let shift = 0.5 + case as f64 * 0.1;
            let values = Array2::from_shape_fn((n_genes, 30), |(_, j)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                if j < 15 {
                    e
                } else {
                    shift + 1.3 * e
                }
            });
            let batches: Vec<&str> = (0..30).map(|j| if j < 15 { "a" } else { "b" }).collect();
            let d = dataset(values, &batches, &[Condition::Control; 30]);
            let opts = CombatOptions {
                tolerance: 1e-10,
                max_iterations: 1000,
                ..no_covariate()
            };
            let model = CombatModel::fit(&d, &opts).unwrap();
            let des = design(&d, Covariate::None, &model.batches).unwrap();
            let z = model.standardize(&d, &des);
            for (b, cols) in d.batch_columns().values().enumerate() {
                for g in 0..n_genes {
                    let row: Vec<f64> = cols.iter().map(|&j| z[g][j]).collect();
                    let sol = eb_solve(
                        &row,
                        model.gamma_hat[b][g],
                        model.delta2_hat[b][g],
                        &model.priors[b],
                        1e-10,
                        1000,
                    )
                    .unwrap();
                    for w in sol.changes.windows(2).skip(3) {
                        assert!(w[1] <= w[0], "case {case} batch {b} gene {g}: {:?}", sol.changes);
                    }
                }
            }
        }
    }

    #[test]
    fn model_serializes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let values = Array2::from_shape_fn((5, 6), |_| StandardNormal.sample(&mut rng));
        let d = dataset(values, &["a", "a", "a", "b", "b", "b"], &[Condition::Control; 6]);
        let model = CombatModel::fit(&d, &no_covariate()).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: CombatModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }
}
