//! Synthetic cohorts with planted batch and condition effects.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_metadata_path, Condition, Dataset, ExpressionMatrix, MatrixFormat, SampleMetadata};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub batches: usize,
    pub samples_per_batch: usize,
    pub genes: usize,
    /// Number of genes shifted between Case and Control.
    pub condition_genes: usize,
    /// Case shift of a planted gene, in units of that gene's noise sd.
    pub condition_effect: f64,
    /// Additive location effect of batch `b` is `b × batch_shift` (log2 units).
    pub batch_shift: f64,
    /// Noise sd of batch `b` is multiplied by `batch_scale^b`.
    pub batch_scale: f64,
    /// Per-gene sd of the batch location effect around its batch mean.
    pub gene_shift_sd: f64,
    pub case_fraction: f64,
    /// Fraction of subjects contributing two samples.
    pub repeat_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            batches: 2,
            samples_per_batch: 50,
            genes: 200,
            condition_genes: 20,
            condition_effect: 1.5,
            batch_shift: 1.0,
            batch_scale: 1.5,
            gene_shift_sd: 0.2,
            case_fraction: 0.5,
            repeat_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedGene {
    pub gene: String,
    /// Case minus Control mean, log2 units.
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedBatch {
    pub batch: String,
    /// Additive location effect per gene, log2 units, in gene order.
    pub gamma: Vec<f64>,
    /// Multiplier of the noise sd.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub genes: Vec<String>,
    pub noise_sd: Vec<f64>,
    pub planted_genes: Vec<PlantedGene>,
    pub batches: Vec<PlantedBatch>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// One dataset per batch, log2 scale.
    pub cohorts: Vec<Dataset>,
    pub truth: GroundTruth,
}

/// Files written for one synthetic batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortFiles {
    pub batch: String,
    pub matrix: PathBuf,
    pub metadata: PathBuf,
}

/// Correlation between the noise of two samples from one subject.
const SUBJECT_CORRELATION: f64 = 0.5;

pub fn generate(spec: &SynthSpec) -> Result<SyntheticData> {
    if spec.batches == 0 || spec.samples_per_batch < 2 || spec.genes == 0 {
        return Err(Error::InvalidParameter(
            "batches, samples and genes must be positive".into(),
        ));
    }
    if spec.condition_genes > spec.genes {
        return Err(Error::InvalidParameter(format!(
            "{} planted genes exceed {} genes",
            spec.condition_genes, spec.genes
        )));
    }
    if !(spec.case_fraction > 0.0 && spec.case_fraction < 1.0) || !(0.0..=1.0).contains(&spec.repeat_fraction) {
        return Err(Error::InvalidParameter(
            "case and repeat fractions must be proportions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.genes.to_string().len().max(4);
    let genes: Vec<String> = (0..spec.genes).map(|g| format!("G{g:0width$}")).collect();
    let base_mean: Vec<f64> = (0..spec.genes).map(|_| rng.random_range(6.0..10.0)).collect();
    let noise_sd: Vec<f64> = (0..spec.genes).map(|_| rng.random_range(0.4..0.8)).collect();

    let mut planted_idx = sample(&mut rng, spec.genes, spec.condition_genes).into_vec();
    planted_idx.sort_unstable();
    let mut effect = vec![0.0; spec.genes];
    let planted_genes = planted_idx
        .iter()
        .map(|&g| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            effect[g] = sign * spec.condition_effect * noise_sd[g];
            PlantedGene {
                gene: genes[g].clone(),
                effect: effect[g],
            }
        })
        .collect();

    let mut cohorts = Vec::with_capacity(spec.batches);
    let mut batches = Vec::with_capacity(spec.batches);
    for b in 0..spec.batches {
        let batch = format!("B{}", b + 1);
        let gamma: Vec<f64> = (0..spec.genes)
            .map(|_| {
                let jitter: f64 = StandardNormal.sample(&mut rng);
                b as f64 * spec.batch_shift + spec.gene_shift_sd * jitter
            })
            .collect();
        let delta = spec.batch_scale.powi(b as i32);

        let n = spec.samples_per_batch;
        let n_case = ((spec.case_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut metadata = Vec::with_capacity(n);
        let mut subject = 0;
        let mut i = 0;
        while i < n {
            let condition = if i < n_case {
                Condition::Case
            } else {
                Condition::Control
            };
            let end_of_block = if i < n_case { n_case } else { n };
            let visits = if i + 1 < end_of_block && rng.random::<f64>() < spec.repeat_fraction {
                2
            } else {
                1
            };
            for _ in 0..visits {
                metadata.push(SampleMetadata {
                    sample_id: format!("{batch}_S{i:03}"),
                    subject_id: format!("{batch}_P{subject:03}"),
                    batch: batch.clone(),
                    condition,
                });
                i += 1;
            }
            subject += 1;
        }

        let mut values = Array2::zeros((spec.genes, n));
        let mut subject_noise: Vec<f64> = vec![0.0; spec.genes];
        let mut last_subject = String::new();
        for (j, m) in metadata.iter().enumerate() {
            if m.subject_id != last_subject {
                for v in subject_noise.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                last_subject = m.subject_id.clone();
            }
            let case = f64::from(m.condition.label());
            for g in 0..spec.genes {
                let own: f64 = StandardNormal.sample(&mut rng);
                let noise = SUBJECT_CORRELATION.sqrt() * subject_noise[g] + (1.0 - SUBJECT_CORRELATION).sqrt() * own;
                values[[g, j]] = base_mean[g] + case * effect[g] + gamma[g] + delta * noise_sd[g] * noise;
            }
        }
        let matrix = ExpressionMatrix::new(
            genes.clone(),
            metadata.iter().map(|m| m.sample_id.clone()).collect(),
            values,
        )?;
        cohorts.push(Dataset::new(matrix, metadata)?);
        batches.push(PlantedBatch { batch, gamma, delta });
    }

    Ok(SyntheticData {
        cohorts,
        truth: GroundTruth {
            spec: spec.clone(),
            genes,
            noise_sd,
            planted_genes,
            batches,
        },
    })
}

/// Write each batch as a linear-scale (2^x) matrix TSV plus metadata TSV,
/// and the ground truth as `ground_truth.json`.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec) -> Result<(Vec<CohortFiles>, GroundTruth)> {
    let data = generate(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (cohort, planted) in data.cohorts.iter().zip(&data.truth.batches) {
        let linear = cohort.matrix().values().mapv(f64::exp2);
        let matrix = cohort.matrix().with_values(linear)?;
        let matrix_path = dir.join(format!("{}_matrix.tsv", planted.batch));
        let metadata_path = dir.join(format!("{}_metadata.tsv", planted.batch));
        matrix.write_path(&matrix_path, MatrixFormat::Tsv)?;
        write_metadata_path(&metadata_path, cohort.metadata())?;
        files.push(CohortFiles {
            batch: planted.batch.clone(),
            matrix: matrix_path,
            metadata: metadata_path,
        });
    }
    let truth_path = dir.join("ground_truth.json");
    let json = serde_json::to_string_pretty(&data.truth)?;
    std::fs::write(&truth_path, json + "\n").map_err(|e| Error::io(&truth_path, e))?;
    Ok((files, data.truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_matrix, load_metadata, merge_on_common_genes};
    use crate::dea::differential_expression;
    use crate::qc::cross_batch_dea_check;

    #[test]
    fn generator_contract() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let (files, truth) = write_synthetic(dir.path(), &spec).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(truth.planted_genes.len(), 20);
        for f in &files {
            let m = load_matrix(&f.matrix, MatrixFormat::Tsv, false).unwrap();
            assert_eq!((m.n_genes(), m.n_samples()), (200, 50));
            assert!(m.values().iter().all(|&v| v > 0.0));
            let md = load_metadata(&f.metadata).unwrap();
            Dataset::new(m, md).unwrap();
        }
        let json = std::fs::read_to_string(dir.path().join("ground_truth.json")).unwrap();
        let back: GroundTruth = serde_json::from_str(&json).unwrap();
        assert_eq!(back, truth);
        let again = generate(&spec).unwrap();
        assert_eq!(again.truth, truth);
    }

    #[test]
    fn null_batches_are_exchangeable() {
        let spec = SynthSpec {
            batch_shift: 0.0,
            batch_scale: 1.0,
            gene_shift_sd: 0.0,
            seed: 4,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let merged = merge_on_common_genes(&data.cohorts).unwrap();
        let report = cross_batch_dea_check(&merged, 0.05).unwrap();
        assert!(
            report.total_significant() <= 2,
            "{} genes flagged",
            report.total_significant()
        );
    }

    #[test]
    fn planted_genes_are_recoverable() {
        let spec = SynthSpec {
            seed: 8,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let merged = merge_on_common_genes(&data.cohorts).unwrap();
        let dea = differential_expression(&merged, 0.05).unwrap();
        let found = dea.significant_genes();
        let hits = data
            .truth
            .planted_genes
            .iter()
            .filter(|p| found.contains(&p.gene))
            .count();
        assert!(hits >= 18, "{hits} of 20 planted genes flagged");
    }
}
