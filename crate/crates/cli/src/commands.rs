use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use exprbench::combat::{CombatModel, CombatOptions};
use exprbench::data::{load_matrix, load_metadata, Dataset, ExpressionMatrix, MatrixFormat};
use exprbench::dea::{compare_sets, differential_expression, DeaResult};
use exprbench::decluster::{decluster, expand_importance, ClusterMap, DeclusterOptions};
use exprbench::explain::tree_shap;
use exprbench::model::{evaluate_scores, learning_curve, roc_curve, CurveOptions, Hyperparams, TreeEnsemble};
use exprbench::pipeline::{
    curve_csv_bytes, fit_model, json_bytes, matrix_bytes, pca_up_to, roc_csv_bytes, run_pipeline, CohortInput,
    EvaluationReport, PipelineConfig, QcReport, ShapReport, SmoteSection,
};
use exprbench::preprocess::{
    log2_transform, quantile_normalize, quantile_normalize_per_batch, QuantileMode, ScalingParams,
};
use exprbench::qc::{cross_batch_dea_check, mixture_score, multimodality_screen};
use exprbench::sampling::{grouped_stratified_split, SmoteConfig, SplitResult};
use exprbench::synth::{write_synthetic, SynthSpec};
use exprbench::tune::{bayes_search, SearchSpace, SmoteOrder, TuneOptions};
use exprbench::{Error, Result};
use ndarray::{Array2, Axis};

use crate::{Command, Common, DatasetArgs, SmoteArgs, SplitDataArgs};

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn require_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(config_error(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(())
}

/// Parsed `--config`, or the all-default configuration when absent.
fn stage_config(common: &Common) -> Result<PipelineConfig> {
    match &common.config {
        Some(path) => {
            require_inputs(&[path])?;
            PipelineConfig::load(path)
        }
        None => Ok(PipelineConfig::for_cohorts(common.out.clone(), 0, Vec::new())),
    }
}

fn write(out: &Path, name: &str, bytes: Vec<u8>) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let path = out.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    require_inputs(&[path])?;
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_matrix_arg(path: &Path, transpose: bool) -> Result<ExpressionMatrix> {
    require_inputs(&[path])?;
    load_matrix(path, MatrixFormat::from_path(path), transpose)
}

fn load_dataset(args: &DatasetArgs) -> Result<Dataset> {
    require_inputs(&[&args.matrix, &args.metadata])?;
    Dataset::new(
        load_matrix_arg(&args.matrix, args.transpose)?,
        load_metadata(&args.metadata)?,
    )
}

fn parse<T: std::str::FromStr>(value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_error(format!("invalid {what} '{value}'")))
}

fn serde_choice<T: serde::de::DeserializeOwned>(value: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| config_error(format!("invalid {what} '{value}'")))
}

fn smote_config(args: &SmoteArgs, section: &SmoteSection, default_seed: u64) -> Option<SmoteConfig> {
    (section.enabled && !args.no_smote).then(|| SmoteConfig {
        k_neighbors: args.smote_k.unwrap_or(section.k_neighbors),
        sampling_ratio: args.smote_ratio.unwrap_or(section.sampling_ratio),
        seed: args.smote_seed.or(section.seed).unwrap_or(default_seed),
    })
}

fn load_params(path: Option<&PathBuf>, cfg: &PipelineConfig) -> Result<Hyperparams> {
    match path {
        Some(p) => Hyperparams::from_toml(&read_text(p)?),
        None => Ok(cfg.train.hyperparams),
    }
}

/// Samples × features with labels, subjects and split indices.
struct SplitData {
    feature_names: Vec<String>,
    x: Array2<f64>,
    y: Vec<u8>,
    groups: Vec<String>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl SplitData {
    fn load(args: &SplitDataArgs) -> Result<Self> {
        let d = load_dataset(&args.data)?;
        let split: SplitResult = serde_json::from_str(&read_text(&args.split)?)?;
        let (train, test) = split.indices(&d);
        if train.len() != split.train.len() || test.len() + train.len() != d.matrix().n_samples() {
            return Err(Error::MetadataMismatch(
                "split.json does not match the feature matrix samples".into(),
            ));
        }
        Ok(Self {
            feature_names: d.matrix().gene_ids().to_vec(),
            x: d.matrix().samples_by_genes(),
            y: d.labels(),
            groups: d.subjects(),
            train,
            test,
        })
    }

    fn part(&self, rows: &[usize]) -> (Array2<f64>, Vec<u8>, Vec<String>) {
        (
            self.x.select(Axis(0), rows),
            rows.iter().map(|&i| self.y[i]).collect(),
            rows.iter().map(|&i| self.groups[i].clone()).collect(),
        )
    }
}

pub(crate) fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            batches,
            samples_per_batch,
            genes,
            condition_genes,
            condition_effect,
            batch_shift,
            batch_scale,
            seed,
            common,
        } => {
            let defaults = SynthSpec::default();
            let spec = SynthSpec {
                batches,
                samples_per_batch,
                genes,
                condition_genes,
                condition_effect: condition_effect.unwrap_or(defaults.condition_effect),
                batch_shift: batch_shift.unwrap_or(defaults.batch_shift),
                batch_scale: batch_scale.unwrap_or(defaults.batch_scale),
                seed,
                ..defaults
            };
            let (files, _) = write_synthetic(&common.out, &spec)?;
            let cohorts = files
                .iter()
                .map(|f| CohortInput {
                    matrix: PathBuf::from(f.matrix.file_name().expect("file name")),
                    metadata: PathBuf::from(f.metadata.file_name().expect("file name")),
                    format: None,
                    transpose: false,
                })
                .collect();
            let cfg = PipelineConfig::for_cohorts(PathBuf::from("results"), seed, cohorts);
            write(&common.out, "pipeline.toml", cfg.to_toml()?.into_bytes())
        }

        Command::Run { common } => {
            let path = common
                .config
                .as_ref()
                .ok_or_else(|| config_error("run needs --config"))?;
            require_inputs(&[path])?;
            let mut cfg = PipelineConfig::load(path)?;
            if common.out != Path::new(".") {
                cfg.output_dir = common.out.clone();
            }
            let manifest = run_pipeline(&cfg)?;
            log::info!(
                "completed {} stages into {}",
                manifest.stages.len(),
                cfg.output_dir.display()
            );
            Ok(())
        }

        Command::Normalize {
            data,
            quantile,
            no_log2,
            log2_offset,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let d = load_dataset(&data)?;
            let mode = match quantile {
                Some(q) => serde_choice(&q, "quantile mode")?,
                None => cfg.normalize.quantile,
            };
            let mut d = match mode {
                QuantileMode::PerBatch => quantile_normalize_per_batch(&d)?,
                QuantileMode::Global => d.with_matrix(quantile_normalize(d.matrix())?)?,
                QuantileMode::None => d,
            };
            if cfg.normalize.log2 && !no_log2 {
                let offset = log2_offset.unwrap_or(cfg.normalize.log2_offset);
                d = d.with_matrix(log2_transform(d.matrix(), offset)?)?;
            }
            write(&common.out, "normalized_matrix.tsv", matrix_bytes(d.matrix())?)
        }

        Command::Combat {
            data,
            covariate,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let d = load_dataset(&data)?;
            let options = CombatOptions {
                covariate: match covariate {
                    Some(c) => parse(&c, "covariate")?,
                    None => cfg.combat.covariate,
                },
                ..Default::default()
            };
            let model = CombatModel::fit(&d, &options)?;
            let corrected = model.apply(&d)?;
            write(&common.out, "combat_matrix.tsv", matrix_bytes(&corrected)?)?;
            write(&common.out, "combat_model.json", json_bytes(&model)?)
        }

        Command::Qc {
            data,
            pca_components,
            mixture_k,
            fdr,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let d = load_dataset(&data)?;
            let p = pca_up_to(d.matrix(), pca_components.unwrap_or(cfg.qc.pca_components))?;
            let mut buf = Vec::new();
            p.write_csv(&mut buf, &d)?;
            write(&common.out, "pca.csv", buf)?;
            let k = mixture_k.unwrap_or(cfg.qc.mixture_k);
            let fdr = fdr.unwrap_or(cfg.qc.fdr);
            let mixture = mixture_score(&d, k)?;
            let cross = cross_batch_dea_check(&d, fdr)?;
            // A single matrix has no before/after pair; both sides describe the input.
            let report = QcReport {
                pca_before_explained: p.explained_variance_ratio.clone(),
                pca_after_explained: p.explained_variance_ratio,
                mixture_before: mixture.clone(),
                mixture_after: mixture,
                cross_batch_before: cross.clone(),
                cross_batch_after: cross,
                bimodality_threshold: cfg.qc.bimodality_threshold,
                multimodal_genes: multimodality_screen(d.matrix(), cfg.qc.bimodality_threshold),
            };
            write(&common.out, "qc_report.json", json_bytes(&report)?)
        }

        Command::Decluster {
            matrix,
            transpose,
            r_threshold,
            signed,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let m = load_matrix_arg(&matrix, transpose)?;
            let opts = DeclusterOptions {
                r_threshold: r_threshold.unwrap_or(cfg.decluster.r_threshold),
                absolute: cfg.decluster.absolute && !signed,
            };
            let (reduced, map) = decluster(&m, &opts, None)?;
            write(&common.out, "declustered_matrix.tsv", matrix_bytes(&reduced)?)?;
            write(&common.out, "clusters.json", (map.to_json(false)? + "\n").into_bytes())
        }

        Command::Split {
            data,
            train_fraction,
            seed,
            stratify,
            scale_on_train,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let d = load_dataset(&data)?;
            let stratify = match stratify {
                Some(s) => serde_choice(&s, "stratification")?,
                None => cfg.split.stratify,
            };
            let split = grouped_stratified_split(
                &d,
                train_fraction.unwrap_or(cfg.split.train_fraction),
                seed.unwrap_or(cfg.split_seed()),
                stratify,
            )?;
            for w in &split.warnings {
                log::warn!("{w}");
            }
            let (tr, _) = split.indices(&d);
            let fit_on = if scale_on_train || cfg.split.scaling_fit == exprbench::pipeline::ScalingFit::Train {
                d.matrix().select_samples(&tr)
            } else {
                d.matrix().clone()
            };
            let scaling = ScalingParams::fit(&fit_on);
            write(&common.out, "split.json", json_bytes(&split)?)?;
            write(&common.out, "scaling.json", json_bytes(&scaling)?)?;
            write(
                &common.out,
                "features.tsv",
                matrix_bytes(&scaling.transform(d.matrix(), false)?)?,
            )
        }

        Command::Tune {
            data,
            n_iter,
            folds,
            seed,
            smote_before_split,
            smote,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let sd = SplitData::load(&data)?;
            let (x, y, groups) = sd.part(&sd.train);
            let seed = seed.unwrap_or(cfg.tune_seed());
            let opts = TuneOptions {
                n_iter: n_iter.unwrap_or(cfg.tune.n_iter),
                folds: folds.unwrap_or(cfg.tune.folds),
                seed,
                smote: smote_config(&smote, &cfg.smote, cfg.smote_seed()),
                smote_order: if smote_before_split {
                    SmoteOrder::BeforeSplit
                } else {
                    cfg.tune.smote_order
                },
                f1_mode: cfg.train.f1_mode,
                threshold: cfg.train.threshold,
            };
            let result = bayes_search(x.view(), &y, &groups, &SearchSpace::boosting(), &opts)?;
            let mut log = Vec::new();
            result.write_trials(&mut log)?;
            write(&common.out, "trials.jsonl", log)?;
            log::info!(
                "best mean F1 {:.4} at trial {}",
                result.trials[result.best_iteration].mean_f1,
                result.best_iteration
            );
            write(&common.out, "best_params.toml", result.best.to_toml().into_bytes())
        }

        Command::Train {
            data,
            params,
            seed,
            full,
            smote,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let sd = SplitData::load(&data)?;
            let hp = load_params(params.as_ref(), &cfg)?;
            let rows: Vec<usize> = if full {
                (0..sd.y.len()).collect()
            } else {
                sd.train.clone()
            };
            let (x, y, _) = sd.part(&rows);
            let smote = smote_config(&smote, &cfg.smote, cfg.smote_seed());
            let (model, added) = fit_model(&x, &y, &hp, smote.as_ref(), seed.unwrap_or(cfg.train_seed()))?;
            log::info!(
                "trained {} trees on {} samples ({added} synthetic)",
                model.trees.len(),
                y.len() + added
            );
            let model = model.with_feature_names(sd.feature_names.clone())?;
            write(&common.out, "model.json", (model.to_json()? + "\n").into_bytes())
        }

        Command::Evaluate {
            data,
            model,
            threshold,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let sd = SplitData::load(&data)?;
            let model = TreeEnsemble::from_json(&read_text(&model)?)?;
            let threshold = threshold.unwrap_or(cfg.train.threshold);
            let (x_tr, y_tr, _) = sd.part(&sd.train);
            let (x_te, y_te, _) = sd.part(&sd.test);
            let test_scores = model.predict_proba(x_te.view())?;
            let report = EvaluationReport {
                hyperparams: model.hp,
                threshold,
                n_train: y_tr.len(),
                n_test: y_te.len(),
                n_synthetic: 0,
                train: evaluate_scores(&model.predict_proba(x_tr.view())?, &y_tr, threshold)?,
                test: evaluate_scores(&test_scores, &y_te, threshold)?,
            };
            log::info!(
                "test macro F1 {:.4}, AUC {:.4}",
                report.test.f1_macro,
                report.test.roc_auc
            );
            write(&common.out, "evaluation.json", json_bytes(&report)?)?;
            write(&common.out, "roc.csv", roc_csv_bytes(&roc_curve(&test_scores, &y_te)?)?)
        }

        Command::LearningCurve {
            data,
            params,
            fractions,
            folds,
            seed,
            smote,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let sd = SplitData::load(&data)?;
            let hp = load_params(params.as_ref(), &cfg)?;
            let (x, y, groups) = sd.part(&sd.train);
            let opts = CurveOptions {
                folds: folds.unwrap_or(cfg.evaluate.folds),
                seed: seed.unwrap_or(cfg.train_seed()),
                smote: smote_config(&smote, &cfg.smote, cfg.smote_seed()),
                f1_mode: cfg.train.f1_mode,
                threshold: cfg.train.threshold,
            };
            let fractions = fractions.unwrap_or(cfg.evaluate.fractions.clone());
            let curve = learning_curve(x.view(), &y, Some(&groups), &hp, &fractions, &opts)?;
            write(&common.out, "learning_curve.csv", curve_csv_bytes(&curve)?)
        }

        Command::Explain {
            model,
            matrix,
            transpose,
            common,
        } => {
            let model = TreeEnsemble::from_json(&read_text(&model)?)?;
            let m = load_matrix_arg(&matrix, transpose)?;
            if m.gene_ids() != model.feature_names.as_slice() {
                return Err(Error::MetadataMismatch(
                    "matrix genes differ from the model's features".into(),
                ));
            }
            let x = m.samples_by_genes();
            let attributions = tree_shap(&model, x.view())?.with_sample_ids(m.sample_ids().to_vec())?;
            let margins = model.predict_margin(x.view())?;
            let report = ShapReport {
                summary: attributions.summary(),
                max_local_accuracy_error: attributions.local_accuracy_error(&margins),
            };
            let mut buf = Vec::new();
            attributions.write_csv(&mut buf)?;
            write(&common.out, "shap.csv", buf)?;
            write(&common.out, "shap_summary.json", json_bytes(&report)?)
        }

        Command::Dea { data, fdr, common } => {
            let cfg = stage_config(&common)?;
            let d = load_dataset(&data)?;
            let result = differential_expression(&d, fdr.unwrap_or(cfg.dea.fdr))?;
            log::info!("{} genes significant", result.significant_genes().len());
            let mut buf = Vec::new();
            result.write_csv(&mut buf)?;
            write(&common.out, "dea.csv", buf)
        }

        Command::Compare {
            shap,
            dea,
            clusters,
            fdr,
            common,
        } => {
            let cfg = stage_config(&common)?;
            let report: ShapReport = serde_json::from_str(&read_text(&shap)?)?;
            require_inputs(&[&dea])?;
            let file = std::fs::File::open(&dea).map_err(|e| Error::Io {
                path: dea.clone(),
                source: e,
            })?;
            let dea = DeaResult::read_csv(file, fdr.unwrap_or(cfg.dea.fdr))?;
            let scores: BTreeMap<String, f64> = report
                .summary
                .ranking
                .iter()
                .map(|r| (r.gene.clone(), r.importance))
                .collect();
            let shap_genes: BTreeSet<String> = match clusters {
                Some(path) => {
                    let genes: Vec<String> = dea.genes.iter().map(|g| g.gene.clone()).collect();
                    let map = ClusterMap::from_json(&read_text(&path)?, cfg.decluster.r_threshold, Some(&genes))?;
                    expand_importance(&scores, &map)?.into_keys().collect()
                }
                None => scores.into_keys().collect(),
            };
            let comparison = compare_sets(&shap_genes, &dea.significant_genes());
            write(&common.out, "comparison.json", json_bytes(&comparison)?)
        }
    }
}
