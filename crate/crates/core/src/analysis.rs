//! Metrics and representation similarity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::EmbeddingStack;

pub const DEFAULT_TIE_THRESHOLD: f64 = 2e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    Length { scores: usize, labels: usize },
    #[error("ROC-AUC needs both classes; got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("cannot average over zero datasets")]
    Empty,
    #[error("tie threshold {0} must be finite and non-negative")]
    Threshold(f64),
    #[error("embedding stack is empty")]
    EmptyStack,
    #[error("layer {layer} has shape {shape:?}, expected {expected:?}")]
    Shape {
        layer: usize,
        shape: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Exact ROC-AUC (Mann–Whitney U over positive–negative pairs, ties worth
/// one half), computed by sorting and accumulating midranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(s));
    }
    let positives = labels.iter().filter(|&&y| y != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives keeps midranks integral.
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end; midrank·2 = start + end + 1.
        let mid2 = (start + end + 1) as u128;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] != 0).count() as u128;
        rank_sum2 += mid2 * pos_in_group;
        start = end;
    }
    let p = positives as u128;
    // U = R - P(P+1)/2, so 2U = 2R - P(P+1).
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Unweighted mean over datasets.
pub fn average_auc(per_dataset: &[f64]) -> Result<f64, MetricError> {
    if per_dataset.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(per_dataset.iter().sum::<f64>() / per_dataset.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub plan: String,
    pub auc: f64,
    pub baseline_auc: f64,
    pub delta: f64,
}

impl MetricRecord {
    pub fn new(dataset: impl Into<String>, plan: impl Into<String>, auc: f64, baseline_auc: f64) -> Self {
        Self {
            dataset: dataset.into(),
            plan: plan.into(),
            auc,
            baseline_auc,
            delta: auc - baseline_auc,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WtlCounts {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WtlCounts {
    pub fn total(&self) -> usize {
        self.wins + self.ties + self.losses
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WtlSummary {
    pub counts: WtlCounts,
    pub tie_threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Win,
    Tie,
    Loss,
}

/// `|delta| <= threshold` is a tie (boundary inclusive).
pub fn classify(delta: f64, threshold: f64) -> Outcome {
    if delta.abs() <= threshold {
        Outcome::Tie
    } else if delta > threshold {
        Outcome::Win
    } else {
        Outcome::Loss
    }
}

pub fn win_tie_lose(records: &[MetricRecord], tie_threshold: f64) -> Result<WtlSummary, MetricError> {
    if !(tie_threshold.is_finite() && tie_threshold >= 0.0) {
        return Err(MetricError::Threshold(tie_threshold));
    }
    let mut counts = WtlCounts::default();
    for r in records {
        match classify(r.delta, tie_threshold) {
            Outcome::Win => counts.wins += 1,
            Outcome::Tie => counts.ties += 1,
            Outcome::Loss => counts.losses += 1,
        }
    }
    Ok(WtlSummary {
        counts,
        tie_threshold,
    })
}

/// Layer-by-layer cosine similarity, averaged over rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineMatrix {
    /// `None` where no row had non-zero norm at both layers.
    pub values: Vec<Vec<Option<f64>>>,
    /// Rows excluded from each cell because of a zero-norm embedding.
    pub excluded: Vec<Vec<usize>>,
}

impl CosineMatrix {
    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn total_excluded(&self) -> usize {
        self.excluded.iter().flatten().sum()
    }
}

/// Entry `(i, j)` is the mean over rows of the cosine between the row's
/// embedding at layer `i` and at layer `j`. Rows with a zero-norm embedding
/// at either layer are left out of that cell and counted. The diagonal is 1
/// and the matrix is symmetric by construction.
pub fn cosine_similarity_matrix(stack: &EmbeddingStack) -> Result<CosineMatrix, MetricError> {
    let layers = &stack.states;
    let first = layers.first().ok_or(MetricError::EmptyStack)?;
    let shape = first.shape().to_vec();
    for (l, t) in layers.iter().enumerate() {
        if t.shape() != shape.as_slice() || shape.len() != 2 {
            return Err(MetricError::Shape {
                layer: l,
                shape: t.shape().to_vec(),
                expected: shape,
            });
        }
    }
    let rows = first.rows();
    let norms: Vec<Vec<f64>> = layers
        .iter()
        .map(|t| {
            (0..rows)
                .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let n = layers.len();
    let mut values = vec![vec![None; n]; n];
    let mut excluded = vec![vec![0; n]; n];
    for i in 0..n {
        let zero_i = norms[i].iter().filter(|&&v| v == 0.0).count();
        excluded[i][i] = zero_i;
        if zero_i < rows {
            values[i][i] = Some(1.0);
        }
        for j in i + 1..n {
            let mut sum = 0.0;
            let mut used = 0usize;
            for r in 0..rows {
                let (ni, nj) = (norms[i][r], norms[j][r]);
                if ni == 0.0 || nj == 0.0 {
                    continue;
                }
                let dot: f64 = layers[i]
                    .row(r)
                    .iter()
                    .zip(layers[j].row(r))
                    .map(|(a, b)| a * b)
                    .sum();
                sum += (dot / (ni * nj)).clamp(-1.0, 1.0);
                used += 1;
            }
            let cell = (used > 0).then(|| (sum / used as f64).clamp(-1.0, 1.0));
            values[i][j] = cell;
            values[j][i] = cell;
            excluded[i][j] = rows - used;
            excluded[j][i] = rows - used;
        }
    }
    Ok(CosineMatrix { values, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.0, 1.0], &[0, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[2.0; 5], &[0, 1, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(MetricError::SingleClass { .. })
        ));
        assert!(roc_auc(&[0.1], &[1, 0]).is_err());
        assert!(roc_auc(&[f64::NAN, 0.0], &[1, 0]).is_err());
    }

    #[test]
    fn averages() {
        assert_eq!(average_auc(&[0.8]).unwrap(), 0.8);
        assert!((average_auc(&[0.8, 0.6]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(average_auc(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn wtl_rule() {
        assert_eq!(classify(0.0, 2e-4), Outcome::Tie);
        assert_eq!(classify(1e-3, 2e-4), Outcome::Win);
        assert_eq!(classify(2e-4, 2e-4), Outcome::Tie);
        assert_eq!(classify(-2e-4, 2e-4), Outcome::Tie);
        assert_eq!(classify(-1e-3, 2e-4), Outcome::Loss);
        assert!(win_tie_lose(&[], -1.0).is_err());
    }

    #[test]
    fn record_delta() {
        let r = MetricRecord::new("d", "skip:0", 0.7, 0.9);
        assert_eq!(r.delta, 0.7 - 0.9);
    }

    fn stack(layers: Vec<Vec<Vec<f64>>>) -> EmbeddingStack {
        let n = layers[0].len();
        EmbeddingStack {
            states: layers.iter().map(|l| Tensor::from_rows(l).unwrap()).collect(),
            labels: vec![0; n],
            train_rows: 0,
        }
    }

    #[test]
    fn cosine_hand_cases() {
        let m = cosine_similarity_matrix(&stack(vec![vec![vec![1.0, 0.0]], vec![vec![1.0, 1.0]]])).unwrap();
        assert!((m.values[0][1].unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(m.values[0][0], Some(1.0));
        let m = cosine_similarity_matrix(&stack(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 3.0]]])).unwrap();
        assert_eq!(m.values[0][1], Some(0.0));
    }

    #[test]
    fn cosine_excludes_zero_rows() {
        let m = cosine_similarity_matrix(&stack(vec![
            vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            vec![vec![2.0, 0.0], vec![1.0, 1.0]],
        ]))
        .unwrap();
        assert_eq!(m.values[0][1], Some(1.0));
        assert_eq!(m.excluded[0][1], 1);
        assert_eq!(m.total_excluded(), 3);
        assert!(cosine_similarity_matrix(&stack(vec![vec![vec![0.0]], vec![vec![1.0]]]))
            .unwrap()
            .values[0][1]
            .is_none());
    }
}
