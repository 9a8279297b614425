use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::TreeEnsemble;
use crate::error::{Error, Result};
use crate::stats::midranks;

/// Which F1 convention to report as the headline score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// Unweighted mean of the per-class F1 scores.
    #[default]
    Macro,
    /// F1 of the positive class only.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub threshold: f64,
    pub f1_macro: f64,
    pub f1_binary: f64,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub roc_auc: f64,
    /// `confusion[actual][predicted]`.
    pub confusion: [[usize; 2]; 2],
}

impl EvalReport {
    pub fn f1(&self, mode: F1Mode) -> f64 {
        match mode {
            F1Mode::Macro => self.f1_macro,
            F1Mode::Binary => self.f1_binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

pub(crate) fn confusion(y: &[u8], predicted: &[u8]) -> [[usize; 2]; 2] {
    let mut c = [[0usize; 2]; 2];
    for (&t, &p) in y.iter().zip(predicted) {
        c[t as usize][p as usize] += 1;
    }
    c
}

/// F1 under `mode` from hard predictions. Classes absent from both vectors score 0.
pub fn f1_score(y: &[u8], predicted: &[u8], mode: F1Mode) -> f64 {
    let c = confusion(y, predicted);
    let f1_pos = f1_from(c[1][1], c[0][1], c[1][0]);
    match mode {
        F1Mode::Binary => f1_pos,
        F1Mode::Macro => 0.5 * (f1_pos + f1_from(c[0][0], c[1][0], c[0][1])),
    }
}

/// Area under the ROC curve as the normalized Mann-Whitney statistic with midranks.
pub fn roc_auc(scores: &[f64], y: &[u8]) -> Result<f64> {
    let n_pos = y.iter().filter(|&&l| l == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let (ranks, _) = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(y).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC operating points from the strictest threshold down, one per distinct score.
pub fn roc_curve(scores: &[f64], y: &[u8]) -> Result<Vec<RocPoint>> {
    let n_pos = y.iter().filter(|&&l| l == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if y[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: ratio(fp, n_neg),
            tpr: ratio(tp, n_pos),
        });
    }
    Ok(points)
}

/// Metrics for probability `scores` thresholded at `threshold` (score >= threshold is positive).
pub fn evaluate_scores(scores: &[f64], y: &[u8], threshold: f64) -> Result<EvalReport> {
    if scores.len() != y.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), y.len())));
    }
    let roc_auc = roc_auc(scores, y)?;
    let predicted: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
    let c = confusion(y, &predicted);
    let [[tn, fp], [fn_, tp]] = c;
    let precision_pos = ratio(tp, tp + fp);
    let precision_neg = ratio(tn, tn + fn_);
    let recall_pos = ratio(tp, tp + fn_);
    let recall_neg = ratio(tn, tn + fp);
    let f1_pos = f1_from(tp, fp, fn_);
    let f1_neg = f1_from(tn, fn_, fp);
    Ok(EvalReport {
        n: y.len(),
        threshold,
        f1_macro: 0.5 * (f1_pos + f1_neg),
        f1_binary: f1_pos,
        accuracy: ratio(tp + tn, y.len()),
        precision_macro: 0.5 * (precision_pos + precision_neg),
        recall_macro: 0.5 * (recall_pos + recall_neg),
        roc_auc,
        confusion: c,
    })
}

pub fn evaluate(e: &TreeEnsemble, x: ArrayView2<f64>, y: &[u8], threshold: f64) -> Result<EvalReport> {
    let scores = e.predict_proba(x)?;
    evaluate_scores(&scores, y, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions() {
        let y = [0u8, 0, 1, 1, 1];
        let s = [0.1, 0.2, 0.7, 0.8, 0.9];
        let r = evaluate_scores(&s, &y, 0.5).unwrap();
        assert_eq!((r.f1_macro, r.accuracy, r.roc_auc), (1.0, 1.0, 1.0));
        assert_eq!(r.confusion, [[2, 0], [0, 3]]);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(4..40);
            let y: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
            // coarse scores force ties
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8))).collect();
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if y[i] == 1 && y[j] == 0 {
                        pairs += 1.0;
                        wins += if s[i] > s[j] {
                            1.0
                        } else if s[i] == s[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            assert!((roc_auc(&s, &y).unwrap() - wins / pairs).abs() < 1e-12);
        }
    }

    #[test]
    fn random_scores_give_half_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y: Vec<u8> = (0..10_000).map(|_| u8::from(rng.random::<bool>())).collect();
        let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        assert!((roc_auc(&s, &y).unwrap() - 0.5).abs() < 0.03);
    }

    #[test]
    fn metrics_agree_with_confusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(5..60);
            let mut y: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
            y[0] = 0;
            y[1] = 1;
            let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let r = evaluate_scores(&s, &y, 0.5).unwrap();
            let [[tn, fp], [fn_, tp]] = r.confusion;
            assert_eq!(tn + fp + fn_ + tp, n);
            let (tn, fp, fn_, tp) = (tn as f64, fp as f64, fn_ as f64, tp as f64);
            assert!((r.accuracy - (tp + tn) / n as f64).abs() < 1e-12);
            let predicted: Vec<u8> = s.iter().map(|&v| u8::from(v >= 0.5)).collect();
            assert!((r.f1_macro - f1_score(&y, &predicted, F1Mode::Macro)).abs() < 1e-12);
            assert!((r.f1_binary - f1_score(&y, &predicted, F1Mode::Binary)).abs() < 1e-12);
            if tp + fn_ > 0.0 && tn + fp > 0.0 {
                assert!((r.recall_macro - 0.5 * (tp / (tp + fn_) + tn / (tn + fp))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roc_curve_ends_at_corner() {
        let y = [0u8, 1, 0, 1];
        let s = [0.2, 0.8, 0.8, 0.9];
        let c = roc_curve(&s, &y).unwrap();
        assert_eq!(c.first().unwrap().fpr, 0.0);
        let last = c.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(c.len(), 4);
        assert!(matches!(roc_auc(&s, &[1, 1, 1, 1]), Err(Error::SingleClass)));
    }
}
