//! `exprbench` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Expression-matrix classification pipeline.
#[derive(Debug, Parser)]
#[command(author, version, about)]
#[command(propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every stage subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// Pipeline configuration whose stage sections supply parameter defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

/// A labelled expression dataset on disk.
#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Genes × samples matrix (TSV or CSV by extension).
    #[arg(long)]
    matrix: PathBuf,
    /// Sample metadata TSV (sample_id, subject_id, batch, condition).
    #[arg(long)]
    metadata: PathBuf,
    /// The matrix stores samples as rows.
    #[arg(long)]
    transpose: bool,
}

/// Scaled features plus the train/test assignment.
#[derive(Debug, Args)]
pub struct SplitDataArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// split.json from the `split` subcommand.
    #[arg(long)]
    split: PathBuf,
}

#[derive(Debug, Args)]
pub struct SmoteArgs {
    /// Train without SMOTE oversampling.
    #[arg(long)]
    no_smote: bool,
    /// Target minority/majority ratio after oversampling.
    #[arg(long)]
    smote_ratio: Option<f64>,
    #[arg(long)]
    smote_k: Option<usize>,
    #[arg(long)]
    smote_seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic cohorts, their ground truth and a pipeline config.
    Synth {
        #[arg(long, default_value_t = 2)]
        batches: usize,
        #[arg(long, default_value_t = 50)]
        samples_per_batch: usize,
        #[arg(long, default_value_t = 200)]
        genes: usize,
        #[arg(long, default_value_t = 20)]
        condition_genes: usize,
        /// Case shift of planted genes in noise-sd units.
        #[arg(long)]
        condition_effect: Option<f64>,
        #[arg(long)]
        batch_shift: Option<f64>,
        #[arg(long)]
        batch_scale: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full pipeline from a configuration file.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Quantile-normalize and log2-transform a merged matrix.
    Normalize {
        #[command(flatten)]
        data: DatasetArgs,
        /// per_batch, global or none.
        #[arg(long)]
        quantile: Option<String>,
        #[arg(long)]
        no_log2: bool,
        #[arg(long)]
        log2_offset: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit and apply empirical-Bayes batch correction.
    Combat {
        #[command(flatten)]
        data: DatasetArgs,
        /// condition or none.
        #[arg(long)]
        covariate: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// PCA coordinates, batch mixture score, multimodality and cross-batch checks.
    Qc {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        pca_components: Option<usize>,
        #[arg(long)]
        mixture_k: Option<usize>,
        #[arg(long)]
        fdr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Collapse highly correlated genes to one representative each.
    Decluster {
        /// Genes × samples matrix.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        transpose: bool,
        #[arg(long)]
        r_threshold: Option<f64>,
        /// Link only positively correlated genes.
        #[arg(long)]
        signed: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Grouped stratified train/test split and min-max scaling.
    Split {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// batch_condition or batch.
        #[arg(long)]
        stratify: Option<String>,
        /// Fit the scaler on training samples only.
        #[arg(long)]
        scale_on_train: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Bayesian hyperparameter search with grouped cross-validation.
    Tune {
        #[command(flatten)]
        data: SplitDataArgs,
        #[arg(long)]
        n_iter: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Oversample before drawing folds instead of inside each fold.
        #[arg(long)]
        smote_before_split: bool,
        #[command(flatten)]
        smote: SmoteArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Train the boosted-tree classifier on the training split.
    Train {
        #[command(flatten)]
        data: SplitDataArgs,
        /// Hyperparameter TOML, e.g. best_params.toml from `tune`.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fit on every sample instead of the training split.
        #[arg(long)]
        full: bool,
        #[command(flatten)]
        smote: SmoteArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Score a trained model on the train and test splits.
    Evaluate {
        #[command(flatten)]
        data: SplitDataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and validation F1 against training-set size.
    LearningCurve {
        #[command(flatten)]
        data: SplitDataArgs,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Comma-separated fractions in (0, 1].
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        smote: SmoteArgs,
        #[command(flatten)]
        common: Common,
    },
    /// TreeSHAP attributions and importance ranking.
    Explain {
        #[arg(long)]
        model: PathBuf,
        /// Genes × samples feature matrix.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        transpose: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Wilcoxon rank-sum tests with Benjamini-Hochberg adjustment, Case vs Control.
    Dea {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        fdr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Partition SHAP-selected and differentially expressed genes.
    Compare {
        /// shap_summary.json from `explain`.
        #[arg(long)]
        shap: PathBuf,
        /// dea.csv from `dea`.
        #[arg(long)]
        dea: PathBuf,
        /// clusters.json from `decluster`, to expand representatives.
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long)]
        fdr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
