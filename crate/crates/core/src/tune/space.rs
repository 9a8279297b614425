use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hyperparams, SCALE_POS_WEIGHT_CHOICES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dimension {
    Int { low: i64, high: i64 },
    Real { low: f64, high: f64, log: bool },
    Categorical { choices: Vec<f64> },
}

impl Dimension {
    /// Width of this dimension in the encoded unit cube.
    fn encoded_width(&self) -> usize {
        match self {
            Dimension::Categorical { choices } => choices.len(),
            _ => 1,
        }
    }

    /// Value at position `u` in [0, 1]; integers round to nearest.
    fn value_at(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Dimension::Int { low, high } => (*low as f64 + u * (high - low) as f64).round(),
            Dimension::Real { low, high, log: false } => low + u * (high - low),
            Dimension::Real { low, high, log: true } => {
                (low.ln() + u * (high.ln() - low.ln())).exp().clamp(*low, *high)
            }
            Dimension::Categorical { choices } => {
                let k = ((u * choices.len() as f64) as usize).min(choices.len() - 1);
                choices[k]
            }
        }
    }

    fn unit_of(&self, value: f64) -> f64 {
        let span = |lo: f64, hi: f64, v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        match self {
            Dimension::Int { low, high } => span(*low as f64, *high as f64, value),
            Dimension::Real { low, high, log: false } => span(*low, *high, value),
            Dimension::Real { low, high, log: true } => span(low.ln(), high.ln(), value.ln()),
            Dimension::Categorical { .. } => unreachable!("categoricals are one-hot encoded"),
        }
    }

    fn contains(&self, value: f64) -> bool {
        match self {
            Dimension::Int { low, high } => value.fract() == 0.0 && value >= *low as f64 && value <= *high as f64,
            Dimension::Real { low, high, .. } => value >= *low && value <= *high,
            Dimension::Categorical { choices } => choices.contains(&value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<(String, Dimension)>,
}

impl SearchSpace {
    /// The gradient-boosting search space.
    pub fn boosting() -> Self {
        let real = |low, high| Dimension::Real { low, high, log: true };
        Self {
            dims: vec![
                ("n_estimators".into(), Dimension::Int { low: 50, high: 600 }),
                ("max_depth".into(), Dimension::Int { low: 2, high: 15 }),
                ("learning_rate".into(), real(1e-3, 1.0)),
                ("gamma".into(), real(1e-4, 100.0)),
                ("reg_alpha".into(), real(1e-4, 100.0)),
                ("reg_lambda".into(), real(1e-4, 100.0)),
                ("min_child_weight".into(), Dimension::Int { low: 1, high: 10 }),
                (
                    "scale_pos_weight".into(),
                    Dimension::Categorical {
                        choices: SCALE_POS_WEIGHT_CHOICES.to_vec(),
                    },
                ),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidSpace("search space has no dimensions".into()));
        }
        for (name, dim) in &self.dims {
            let ok = match dim {
                Dimension::Int { low, high } => low <= high,
                Dimension::Real { low, high, log } => {
                    low.is_finite() && high.is_finite() && low <= high && (!log || *low > 0.0)
                }
                Dimension::Categorical { choices } => !choices.is_empty(),
            };
            if !ok {
                return Err(Error::InvalidSpace(format!(
                    "dimension {name} has empty or invalid bounds"
                )));
            }
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        self.dims.iter().map(|(_, d)| d.encoded_width()).sum()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.len() && self.dims.iter().zip(point).all(|((_, d), &v)| d.contains(v))
    }

    /// Map a point to the unit cube, one-hot for categoricals.
    pub fn encode(&self, point: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for ((_, dim), &v) in self.dims.iter().zip(point) {
            match dim {
                Dimension::Categorical { choices } => {
                    out.extend(choices.iter().map(|&c| if c == v { 1.0 } else { 0.0 }));
                }
                _ => out.push(dim.unit_of(v)),
            }
        }
        out
    }

    /// One unit coordinate per dimension; categoricals map to their slot centre.
    pub fn to_unit(&self, point: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(point)
            .map(|((_, d), &v)| match d {
                Dimension::Categorical { choices } => {
                    let k = choices.iter().position(|&c| c == v).unwrap_or(0);
                    (k as f64 + 0.5) / choices.len() as f64
                }
                _ => d.unit_of(v),
            })
            .collect()
    }

    /// Point from one unit coordinate per dimension.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(u).map(|((_, d), &v)| d.value_at(v)).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: Vec<f64> = (0..self.len()).map(|_| rng.random()).collect();
        self.from_unit(&u)
    }

    /// Latin hypercube design of `n` points.
    pub fn latin_hypercube<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        use rand::seq::SliceRandom;
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(self.len());
        for _ in 0..self.len() {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(rng);
            columns.push(
                strata
                    .iter()
                    .map(|&s| (s as f64 + rng.random::<f64>()) / n as f64)
                    .collect(),
            );
        }
        (0..n)
            .map(|i| {
                let u: Vec<f64> = columns.iter().map(|c| c[i]).collect();
                self.from_unit(&u)
            })
            .collect()
    }

    /// Interpret a point of a boosting space as hyperparameters.
    pub fn to_hyperparams(&self, point: &[f64]) -> Result<Hyperparams> {
        let mut hp = Hyperparams::default();
        for ((name, _), &v) in self.dims.iter().zip(point) {
            match name.as_str() {
                "n_estimators" => hp.n_estimators = v as usize,
                "max_depth" => hp.max_depth = v as usize,
                "learning_rate" => hp.learning_rate = v,
                "gamma" => hp.gamma = v,
                "reg_alpha" => hp.reg_alpha = v,
                "reg_lambda" => hp.reg_lambda = v,
                "min_child_weight" => hp.min_child_weight = v,
                "scale_pos_weight" => hp.scale_pos_weight = v,
                other => return Err(Error::InvalidSpace(format!("unknown hyperparameter {other}"))),
            }
        }
        hp.validate()?;
        Ok(hp)
    }
}
