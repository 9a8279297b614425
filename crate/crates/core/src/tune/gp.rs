use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const NOISE: f64 = 1e-6;
const LENGTH_SCALES: [f64; 9] = [0.05, 0.1, 0.15, 0.25, 0.4, 0.6, 1.0, 1.5, 2.5];

fn matern52(r: f64, length_scale: f64) -> f64 {
    let s = 5f64.sqrt() * r / length_scale;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gaussian-process regressor with an isotropic Matérn 5/2 kernel on
/// standardized targets.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    x: Vec<Vec<f64>>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_std: f64,
    pub length_scale: f64,
}

impl GaussianProcess {
    /// Fit, choosing the length scale by log marginal likelihood over a grid.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = y.len();
        if n == 0 || x.len() != n {
            return Err(Error::DegenerateInput("no observations for the surrogate".into()));
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let z = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_std));

        let mut best: Option<(f64, Self)> = None;
        for &ls in &LENGTH_SCALES {
            let k = DMatrix::from_fn(n, n, |i, j| {
                matern52(distance(&x[i], &x[j]), ls) + if i == j { NOISE } else { 0.0 }
            });
            let Some(chol) = k.cholesky() else { continue };
            let alpha = chol.solve(&z);
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let lml = -0.5 * z.dot(&alpha) - 0.5 * log_det;
            if !lml.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                best = Some((
                    lml,
                    Self {
                        x: x.to_vec(),
                        chol,
                        alpha,
                        y_mean,
                        y_std,
                        length_scale: ls,
                    },
                ));
            }
        }
        best.map(|(_, gp)| gp)
            .ok_or_else(|| Error::DegenerateInput("surrogate kernel matrix is not positive definite".into()))
    }

    /// Posterior mean and standard deviation in the original target units.
    pub fn predict(&self, point: &[f64]) -> (f64, f64) {
        let (mean, sd) = self.predict_standardized(point);
        (self.y_mean + self.y_std * mean, self.y_std * sd)
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    /// Posterior on the standardized target scale.
    pub fn predict_standardized(&self, point: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| matern52(distance(xi, point), self.length_scale)),
        );
        let mean = k.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&k)
            .expect("triangular factor is invertible");
        let var = (1.0 - v.dot(&v)).max(1e-12);
        (mean, var.sqrt())
    }
}

/// Expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mean: f64, sd: f64, best: f64, xi: f64) -> f64 {
    let improvement = mean - best - xi;
    if sd <= 0.0 {
        return improvement.max(0.0);
    }
    let z = improvement / sd;
    let cdf = 0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    improvement * cdf + sd * pdf
}
