//! Synthetic binary-classification tasks for training and evaluation.
//!
//! Features are i.i.d. standard normal. A teacher maps each row to a real
//! score, Gaussian noise is added, and rows scoring above the empirical
//! median are labelled 1. Ranking (ties broken by row index) realizes the
//! median threshold, so every task with at least two rows has both classes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::table::Table;
use crate::tensor::Tensor;

/// Hidden width of the random two-layer teacher network.
pub const MLP_TEACHER_HIDDEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("empty {name} range [{lo}, {hi}]")]
    EmptyRange {
        name: &'static str,
        lo: usize,
        hi: usize,
    },
    #[error("noise_std must be finite and nonnegative, got {0}")]
    Noise(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Teacher {
    /// Random Gaussian weight vector.
    Linear,
    /// `tanh` hidden layer followed by a linear readout, weights ~ N(0, 1/fan_in).
    RandomMlp,
}

/// Distribution over synthetic tasks. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskPrior {
    #[serde(rename = "features")]
    pub feature_count_range: (usize, usize),
    #[serde(rename = "samples")]
    pub sample_count_range: (usize, usize),
    pub teacher: Teacher,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskPrior {
    fn default() -> Self {
        Self {
            feature_count_range: (2, 8),
            sample_count_range: (64, 128),
            teacher: Teacher::Linear,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl TaskPrior {
    pub fn validate(&self) -> Result<(), PriorError> {
        let (flo, fhi) = self.feature_count_range;
        if flo == 0 || flo > fhi {
            return Err(PriorError::EmptyRange {
                name: "feature count",
                lo: flo,
                hi: fhi,
            });
        }
        let (slo, shi) = self.sample_count_range;
        if slo < 2 || slo > shi {
            return Err(PriorError::EmptyRange {
                name: "sample count",
                lo: slo,
                hi: shi,
            });
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(PriorError::Noise(self.noise_std));
        }
        Ok(())
    }

    /// The `index`-th task of this prior's seeded stream.
    pub fn task(&self, index: u64) -> Result<Table, PriorError> {
        let mut rng = seed::rng_at(self.seed, &[seed::stream::TASK, index]);
        let mut table = sample_task(self, &mut rng)?;
        table.name = format!("synthetic-{index}");
        Ok(table)
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn sample_task<R: Rng + ?Sized>(prior: &TaskPrior, rng: &mut R) -> Result<Table, PriorError> {
    prior.validate()?;
    let (flo, fhi) = prior.feature_count_range;
    let (slo, shi) = prior.sample_count_range;
    let d = rng.gen_range(flo..=fhi);
    let n = rng.gen_range(slo..=shi);

    let x: Vec<f64> = (0..n * d).map(|_| normal(rng)).collect();
    let scores: Vec<f64> = match prior.teacher {
        Teacher::Linear => {
            let w: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            x.chunks(d)
                .map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum())
                .collect()
        }
        Teacher::RandomMlp => {
            let h = MLP_TEACHER_HIDDEN;
            let s1 = (1.0 / d as f64).sqrt();
            let w1: Vec<f64> = (0..d * h).map(|_| normal(rng) * s1).collect();
            let b1: Vec<f64> = (0..h).map(|_| normal(rng) * s1).collect();
            let s2 = (1.0 / h as f64).sqrt();
            let w2: Vec<f64> = (0..h).map(|_| normal(rng) * s2).collect();
            x.chunks(d)
                .map(|row| {
                    (0..h)
                        .map(|j| {
                            let pre: f64 =
                                b1[j] + (0..d).map(|i| row[i] * w1[i * h + j]).sum::<f64>();
                            pre.tanh() * w2[j]
                        })
                        .sum()
                })
                .collect()
        }
    };
    let noisy: Vec<f64> = scores
        .into_iter()
        .map(|s| s + prior.noise_std * normal(rng))
        .collect();
    let labels = median_labels(&noisy);
    let features = Tensor::matrix(n, d, x).expect("n·d features");
    Ok(Table::new("synthetic", features, labels))
}

/// Labels the upper half (by rank, ties to the lower row index first) as 1.
fn median_labels(scores: &[f64]) -> Vec<u8> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut labels = vec![0u8; n];
    for &r in &order[n - n / 2..] {
        labels[r] = 1;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_task() {
        let prior = TaskPrior {
            seed: 42,
            ..TaskPrior::default()
        };
        assert_eq!(prior.task(3).unwrap(), prior.task(3).unwrap());
        assert_ne!(prior.task(3).unwrap(), prior.task(4).unwrap());
    }

    #[test]
    fn degenerate_ranges_are_rejected() {
        let mut prior = TaskPrior {
            feature_count_range: (5, 4),
            ..TaskPrior::default()
        };
        assert!(matches!(prior.validate(), Err(PriorError::EmptyRange { .. })));
        prior.feature_count_range = (1, 1);
        prior.sample_count_range = (1, 3);
        assert!(prior.validate().is_err());
        prior.sample_count_range = (2, 3);
        prior.noise_std = -1.0;
        assert!(matches!(prior.validate(), Err(PriorError::Noise(_))));
    }

    #[test]
    fn sizes_fall_in_ranges() {
        let prior = TaskPrior {
            feature_count_range: (3, 5),
            sample_count_range: (10, 12),
            teacher: Teacher::RandomMlp,
            ..TaskPrior::default()
        };
        for i in 0..50 {
            let t = prior.task(i).unwrap();
            assert!((3..=5).contains(&t.n_features()));
            assert!((10..=12).contains(&t.n_rows()));
        }
    }

    #[test]
    fn median_labels_balance_and_ties() {
        assert_eq!(median_labels(&[3.0, 1.0, 2.0, 0.0]), vec![1, 0, 1, 0]);
        assert_eq!(median_labels(&[1.0, 1.0]), vec![0, 1]);
        assert_eq!(median_labels(&[5.0, 1.0, 3.0]), vec![1, 0, 0]);
    }
}
