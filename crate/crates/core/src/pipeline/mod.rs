//! Configuration-driven end-to-end pipeline with hashed artifacts.

mod config;
mod manifest;

pub use config::{
    CohortInput, CombatConfig, CompareConfig, DeaConfig, DeclusterConfig, EvaluateConfig, ExplainConfig, ExplainModel,
    NormalizeConfig, PipelineConfig, QcConfig, ScalingFit, SmoteSection, SplitConfig, TrainConfig, TuneConfig,
};
pub use manifest::{sha256_file, sha256_hex, ArtifactRecord, RunManifest, StageRecord, StageStatus};

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::combat::{CombatModel, CombatOptions};
use crate::data::{
    load_matrix, load_metadata, merge_on_common_genes, write_metadata, Dataset, ExpressionMatrix, MatrixFormat,
};
use crate::dea::{compare_sets, differential_expression};
use crate::decluster::{decluster, expand_importance, Cluster, ClusterMap, DeclusterOptions};
use crate::error::{Error, Result};
use crate::explain::{tree_shap, ShapSummary};
use crate::model::{
    evaluate_scores, learning_curve, roc_curve, train, CurveOptions, CurvePoint, EvalReport, Hyperparams, RocPoint,
    TreeEnsemble,
};
use crate::preprocess::{
    log2_transform, quantile_normalize, quantile_normalize_per_batch, QuantileMode, ScalingParams,
};
use crate::qc::{
    cross_batch_dea_check, mixture_score, multimodality_screen, pca, CrossBatchReport, MixtureScoreReport, PcaResult,
};
use crate::sampling::{grouped_stratified_split, oversample_minority, SmoteConfig};
use crate::tune::{bayes_search, SearchSpace, TuneOptions};

pub const LOCK_FILE: &str = ".exprbench.lock";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn matrix_bytes(m: &ExpressionMatrix) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    m.write(&mut buf, MatrixFormat::Tsv)?;
    Ok(buf)
}

pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        fill(&mut w)?;
        w.flush().map_err(|e| Error::io("<csv buffer>", e))?;
    }
    Ok(buf)
}

struct StageContext<'a> {
    out: &'a Path,
    outputs: Vec<ArtifactRecord>,
}

impl StageContext<'_> {
    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(ArtifactRecord {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }
}

struct Runner<'a> {
    out: &'a Path,
    stages: Vec<StageRecord>,
    artifacts: BTreeMap<String, ArtifactRecord>,
}

impl<'a> Runner<'a> {
    fn stage<T>(
        &mut self,
        name: &str,
        inputs: &[&str],
        f: impl FnOnce(&mut StageContext<'a>) -> Result<T>,
    ) -> Result<T> {
        log::info!("stage {name}");
        let started = Instant::now();
        let mut ctx = StageContext {
            out: self.out,
            outputs: Vec::new(),
        };
        let value = f(&mut ctx).map_err(|source| Error::Stage {
            stage: name.to_string(),
            source: Box::new(source),
        })?;
        let inputs = inputs.iter().filter_map(|i| self.artifacts.get(*i).cloned()).collect();
        for a in &ctx.outputs {
            self.artifacts.insert(a.path.clone(), a.clone());
        }
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: StageStatus::Completed,
            inputs,
            outputs: ctx.outputs,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(value)
    }

    fn skip(&mut self, name: &str) {
        log::info!("stage {name} skipped");
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: StageStatus::Skipped,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seconds: 0.0,
        });
    }
}

#[derive(Serialize)]
struct CohortSummary {
    matrix: String,
    metadata: String,
    matrix_sha256: String,
    metadata_sha256: String,
    batches: Vec<String>,
    n_genes: usize,
    n_samples: usize,
}

/// Batch-effect diagnostics before and after correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub pca_before_explained: Vec<f64>,
    pub pca_after_explained: Vec<f64>,
    pub mixture_before: MixtureScoreReport,
    pub mixture_after: MixtureScoreReport,
    pub cross_batch_before: CrossBatchReport,
    pub cross_batch_after: CrossBatchReport,
    pub bimodality_threshold: f64,
    pub multimodal_genes: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub hyperparams: Hyperparams,
    pub threshold: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_synthetic: usize,
    pub train: EvalReport,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    #[serde(flatten)]
    pub summary: ShapSummary,
    pub max_local_accuracy_error: f64,
}

pub fn roc_csv_bytes(points: &[RocPoint]) -> Result<Vec<u8>> {
    csv_bytes(&["threshold", "fpr", "tpr"], |w| {
        for p in points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        Ok(())
    })
}

pub fn curve_csv_bytes(points: &[CurvePoint]) -> Result<Vec<u8>> {
    csv_bytes(&["fraction", "n_train", "train_f1", "val_f1"], |w| {
        for p in points {
            w.write_record([
                p.fraction.to_string(),
                p.n_train.to_string(),
                p.train_f1.to_string(),
                p.val_f1.to_string(),
            ])?;
        }
        Ok(())
    })
}

fn file_label(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// PCA with as many of the requested components as the data's rank allows.
pub fn pca_up_to(m: &ExpressionMatrix, k: usize) -> Result<PcaResult> {
    let k = k.min(m.n_samples().saturating_sub(1)).min(m.n_genes()).max(1);
    match pca(m, k) {
        Err(Error::RankDeficiency { rank, .. }) if rank > 0 => pca(m, rank),
        other => other,
    }
}

fn rows_of(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Train, after SMOTE when configured. Returns the model and the synthetic row count.
pub fn fit_model(
    x: &Array2<f64>,
    y: &[u8],
    hp: &Hyperparams,
    smote: Option<&SmoteConfig>,
    seed: u64,
) -> Result<(TreeEnsemble, usize)> {
    match smote {
        Some(cfg) => {
            let (xs, ys, added) = oversample_minority(x, y, cfg)?;
            Ok((train(xs.view(), &ys, hp, seed)?, added))
        }
        None => Ok((train(x.view(), y, hp, seed)?, 0)),
    }
}

/// Run every enabled stage, writing artifacts and `manifest.json` into the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out = cfg.output_dir.as_path();
    let _lock = OutputLock::acquire(out)?;
    let mut run = Runner {
        out,
        stages: Vec::new(),
        artifacts: BTreeMap::new(),
    };

    let cohorts: Vec<Dataset> = run.stage("ingest", &[], |ctx| {
        let mut datasets = Vec::new();
        let mut summary = Vec::new();
        for c in &cfg.cohorts {
            let format = c.format.unwrap_or_else(|| MatrixFormat::from_path(&c.matrix));
            let d = Dataset::new(
                load_matrix(&c.matrix, format, c.transpose)?,
                load_metadata(&c.metadata)?,
            )?;
            summary.push(CohortSummary {
                matrix: file_label(&c.matrix),
                metadata: file_label(&c.metadata),
                matrix_sha256: sha256_file(&c.matrix)?,
                metadata_sha256: sha256_file(&c.metadata)?,
                batches: d.batches(),
                n_genes: d.matrix().n_genes(),
                n_samples: d.matrix().n_samples(),
            });
            datasets.push(d);
        }
        ctx.write("ingest.json", json_bytes(&summary)?)?;
        Ok(datasets)
    })?;

    let merged = run.stage("merge", &["ingest.json"], |ctx| {
        let d = merge_on_common_genes(&cohorts)?;
        ctx.write("merged_matrix.tsv", matrix_bytes(d.matrix())?)?;
        let mut meta = Vec::new();
        write_metadata(&mut meta, d.metadata())?;
        ctx.write("metadata.tsv", meta)?;
        Ok(d)
    })?;
    drop(cohorts);

    let normalized = run.stage("normalize", &["merged_matrix.tsv", "metadata.tsv"], |ctx| {
        let mut d = match cfg.normalize.quantile {
            QuantileMode::PerBatch => quantile_normalize_per_batch(&merged)?,
            QuantileMode::Global => merged.with_matrix(quantile_normalize(merged.matrix())?)?,
            QuantileMode::None => merged.clone(),
        };
        if cfg.normalize.log2 {
            d = d.with_matrix(log2_transform(d.matrix(), cfg.normalize.log2_offset)?)?;
        }
        ctx.write("normalized_matrix.tsv", matrix_bytes(d.matrix())?)?;
        Ok(d)
    })?;

    let corrected = if cfg.combat.enabled {
        run.stage("combat", &["normalized_matrix.tsv", "metadata.tsv"], |ctx| {
            let options = CombatOptions {
                covariate: cfg.combat.covariate,
                ..Default::default()
            };
            let model = CombatModel::fit(&normalized, &options)?;
            let d = normalized.with_matrix(model.apply(&normalized)?)?;
            ctx.write("combat_matrix.tsv", matrix_bytes(d.matrix())?)?;
            ctx.write("combat_model.json", json_bytes(&model)?)?;
            Ok(d)
        })?
    } else {
        run.skip("combat");
        normalized.clone()
    };
    let corrected_name = if cfg.combat.enabled {
        "combat_matrix.tsv"
    } else {
        "normalized_matrix.tsv"
    };

    if cfg.qc.enabled {
        run.stage(
            "qc",
            &["normalized_matrix.tsv", corrected_name, "metadata.tsv"],
            |ctx| {
                let before = pca_up_to(normalized.matrix(), cfg.qc.pca_components)?;
                let after = pca_up_to(corrected.matrix(), cfg.qc.pca_components)?;
                let mut buf = Vec::new();
                before.write_csv(&mut buf, &normalized)?;
                ctx.write("pca_before.csv", buf)?;
                let mut buf = Vec::new();
                after.write_csv(&mut buf, &corrected)?;
                ctx.write("pca_after.csv", buf)?;
                let report = QcReport {
                    pca_before_explained: before.explained_variance_ratio.clone(),
                    pca_after_explained: after.explained_variance_ratio.clone(),
                    mixture_before: mixture_score(&normalized, cfg.qc.mixture_k)?,
                    mixture_after: mixture_score(&corrected, cfg.qc.mixture_k)?,
                    cross_batch_before: cross_batch_dea_check(&normalized, cfg.qc.fdr)?,
                    cross_batch_after: cross_batch_dea_check(&corrected, cfg.qc.fdr)?,
                    bimodality_threshold: cfg.qc.bimodality_threshold,
                    multimodal_genes: multimodality_screen(corrected.matrix(), cfg.qc.bimodality_threshold),
                };
                ctx.write("qc_report.json", json_bytes(&report)?)
            },
        )?;
    } else {
        run.skip("qc");
    }

    let (reduced, clusters) = if cfg.decluster.enabled {
        run.stage("decluster", &[corrected_name], |ctx| {
            let opts = DeclusterOptions {
                r_threshold: cfg.decluster.r_threshold,
                absolute: cfg.decluster.absolute,
            };
            let (m, map) = decluster(corrected.matrix(), &opts, None)?;
            ctx.write("clusters.json", (map.to_json(false)? + "\n").into_bytes())?;
            Ok((m, map))
        })?
    } else {
        run.skip("decluster");
        let map = ClusterMap {
            clusters: corrected
                .matrix()
                .gene_ids()
                .iter()
                .map(|g| Cluster {
                    rep: g.clone(),
                    members: vec![g.clone()],
                })
                .collect(),
            threshold: 1.0,
        };
        (corrected.matrix().clone(), map)
    };
    let reduced = corrected.with_matrix(reduced)?;

    let labels = reduced.labels();
    let subjects = reduced.subjects();
    let (features, train_idx, test_idx) =
        run.stage("split", &[corrected_name, "clusters.json", "metadata.tsv"], |ctx| {
            let split =
                grouped_stratified_split(&reduced, cfg.split.train_fraction, cfg.split_seed(), cfg.split.stratify)?;
            for w in &split.warnings {
                log::warn!("{w}");
            }
            let (tr, te) = split.indices(&reduced);
            let fit_on = match cfg.split.scaling_fit {
                ScalingFit::Full => reduced.matrix().clone(),
                ScalingFit::Train => reduced.matrix().select_samples(&tr),
            };
            let scaling = ScalingParams::fit(&fit_on);
            let scaled = scaling.transform(reduced.matrix(), false)?;
            ctx.write("split.json", json_bytes(&split)?)?;
            ctx.write("scaling.json", json_bytes(&scaling)?)?;
            ctx.write("features.tsv", matrix_bytes(&scaled)?)?;
            Ok((scaled, tr, te))
        })?;
    let x_all = features.samples_by_genes();
    let x_train = rows_of(&x_all, &train_idx);
    let y_train: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let groups_train: Vec<String> = train_idx.iter().map(|&i| subjects[i].clone()).collect();
    let x_test = rows_of(&x_all, &test_idx);
    let y_test: Vec<u8> = test_idx.iter().map(|&i| labels[i]).collect();
    let smote = cfg.smote.enabled.then(|| SmoteConfig {
        k_neighbors: cfg.smote.k_neighbors,
        sampling_ratio: cfg.smote.sampling_ratio,
        seed: cfg.smote_seed(),
    });

    let hp = if cfg.tune.enabled {
        run.stage("tune", &["features.tsv", "split.json"], |ctx| {
            let opts = TuneOptions {
                n_iter: cfg.tune.n_iter,
                folds: cfg.tune.folds,
                seed: cfg.tune_seed(),
                smote,
                smote_order: cfg.tune.smote_order,
                f1_mode: cfg.train.f1_mode,
                threshold: cfg.train.threshold,
            };
            let result = bayes_search(x_train.view(), &y_train, &groups_train, &SearchSpace::boosting(), &opts)?;
            let mut log = Vec::new();
            result.write_trials(&mut log)?;
            ctx.write("trials.jsonl", log)?;
            ctx.write("best_params.toml", result.best.to_toml().into_bytes())?;
            Ok(result.best)
        })?
    } else {
        run.skip("tune");
        cfg.train.hyperparams
    };
    let hp_source = if cfg.tune.enabled {
        "best_params.toml"
    } else {
        "features.tsv"
    };

    let feature_names = features.gene_ids().to_vec();
    let (model, n_synthetic) = run.stage("train", &["features.tsv", "split.json", hp_source], |ctx| {
        let (model, added) = fit_model(&x_train, &y_train, &hp, smote.as_ref(), cfg.train_seed())?;
        let model = model.with_feature_names(feature_names.clone())?;
        ctx.write("model.json", (model.to_json()? + "\n").into_bytes())?;
        Ok((model, added))
    })?;

    run.stage("evaluate", &["model.json", "features.tsv", "split.json"], |ctx| {
        let threshold = cfg.train.threshold;
        let test_scores = model.predict_proba(x_test.view())?;
        let report = EvaluationReport {
            hyperparams: hp,
            threshold,
            n_train: y_train.len(),
            n_test: y_test.len(),
            n_synthetic,
            train: evaluate_scores(&model.predict_proba(x_train.view())?, &y_train, threshold)?,
            test: evaluate_scores(&test_scores, &y_test, threshold)?,
        };
        ctx.write("evaluation.json", json_bytes(&report)?)?;
        ctx.write("roc.csv", roc_csv_bytes(&roc_curve(&test_scores, &y_test)?)?)?;
        if cfg.evaluate.learning_curve {
            let opts = CurveOptions {
                folds: cfg.evaluate.folds,
                seed: cfg.train_seed(),
                smote,
                f1_mode: cfg.train.f1_mode,
                threshold,
            };
            let curve = learning_curve(
                x_train.view(),
                &y_train,
                Some(&groups_train),
                &hp,
                &cfg.evaluate.fractions,
                &opts,
            )?;
            ctx.write("learning_curve.csv", curve_csv_bytes(&curve)?)?;
        }
        Ok(())
    })?;

    let shap_genes = if cfg.explain.enabled {
        Some(
            run.stage("explain", &["model.json", "features.tsv", "metadata.tsv"], |ctx| {
                let explained = match cfg.explain.model {
                    ExplainModel::Full => {
                        let (m, _) = fit_model(&x_all, &labels, &hp, smote.as_ref(), cfg.train_seed())?;
                        let m = m.with_feature_names(feature_names.clone())?;
                        ctx.write("model_full.json", (m.to_json()? + "\n").into_bytes())?;
                        m
                    }
                    ExplainModel::Train => model.clone(),
                };
                let attributions =
                    tree_shap(&explained, x_all.view())?.with_sample_ids(features.sample_ids().to_vec())?;
                let margins = explained.predict_margin(x_all.view())?;
                let report = ShapReport {
                    summary: attributions.summary(),
                    max_local_accuracy_error: attributions.local_accuracy_error(&margins),
                };
                let mut buf = Vec::new();
                attributions.write_csv(&mut buf)?;
                ctx.write("shap.csv", buf)?;
                ctx.write("shap_summary.json", json_bytes(&report)?)?;
                Ok(report.summary)
            })?,
        )
    } else {
        run.skip("explain");
        None
    };

    let dea = if cfg.dea.enabled {
        Some(run.stage("dea", &[corrected_name, "metadata.tsv"], |ctx| {
            let result = differential_expression(&corrected, cfg.dea.fdr)?;
            let mut buf = Vec::new();
            result.write_csv(&mut buf)?;
            ctx.write("dea.csv", buf)?;
            Ok(result)
        })?)
    } else {
        run.skip("dea");
        None
    };

    match (cfg.compare.enabled, shap_genes, dea) {
        (true, Some(summary), Some(dea)) => {
            run.stage("compare", &["shap_summary.json", "dea.csv", "clusters.json"], |ctx| {
                let scores: BTreeMap<String, f64> =
                    summary.ranking.iter().map(|r| (r.gene.clone(), r.importance)).collect();
                let shap_set: BTreeSet<String> = expand_importance(&scores, &clusters)?.into_keys().collect();
                let comparison = compare_sets(&shap_set, &dea.significant_genes());
                ctx.write("comparison.json", json_bytes(&comparison)?)
            })?;
        }
        _ => run.skip("compare"),
    }

    let config_json = serde_json::to_vec(cfg)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: sha256_hex(&config_json),
        seed: cfg.seed,
        stages: run.stages,
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, json_bytes(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
