//! Stratified three-way split of a table into one in-context episode.
//!
//! Rows are partitioned into a support set (the labelled context), a
//! probe-train set (held out of the context, used only to fit probes) and a
//! query set (predicted by the model and used to evaluate everything).
//! The default fractions give the probe-train set the same size as the
//! support set, so the nominal training split is support ∪ probe-train with
//! half of it withheld from the context.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{count_classes, Table};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("split fractions support={support}, probe={probe} must lie in (0,1) and sum below 1")]
    Fractions { support: f64, probe: f64 },
    #[error("table `{table}` with class counts {counts:?} is too small: {split} split has {have:?} rows per class, need at least 2 of each")]
    TooSmall {
        table: String,
        counts: [usize; 2],
        split: &'static str,
        have: [usize; 2],
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub support_fraction: f64,
    pub probe_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            support_fraction: 0.35,
            probe_fraction: 0.35,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), SplitError> {
        let (s, p) = (self.support_fraction, self.probe_fraction);
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !(ok(s) && ok(p) && s + p < 1.0) {
            return Err(SplitError::Fractions {
                support: s,
                probe: p,
            });
        }
        Ok(())
    }
}

/// One in-context learning instance.
///
/// Query labels are kept for evaluation only; the model never sees them.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub name: String,
    pub support: Vec<usize>,
    pub probe: Vec<usize>,
    pub query: Vec<usize>,
    pub support_x: Tensor,
    pub support_y: Vec<u8>,
    pub probe_x: Tensor,
    pub probe_y: Vec<u8>,
    pub query_x: Tensor,
    pub query_y: Vec<u8>,
}

impl Episode {
    pub fn n_features(&self) -> usize {
        self.support_x.cols()
    }

    /// Rescales every partition with column statistics of the support rows.
    /// Zero-variance support columns become all zeros.
    pub fn standardize_by_support(&mut self) {
        let [probe, query] = [&mut self.probe_x, &mut self.query_x];
        standardize_with_reference(&mut self.support_x, &mut [probe, query]);
    }
}

/// Standardizes `reference` and every tensor in `others` with the column
/// mean and population variance of `reference`.
pub(crate) fn standardize_with_reference(reference: &mut Tensor, others: &mut [&mut Tensor]) {
    let d = reference.cols();
    let n = reference.rows() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..reference.rows() {
        for (c, v) in reference.row(r).iter().enumerate() {
            mean[c] += v / n;
        }
    }
    for r in 0..reference.rows() {
        for (c, v) in reference.row(r).iter().enumerate() {
            var[c] += (v - mean[c]).powi(2) / n;
        }
    }
    let apply = |x: &mut Tensor| {
        for row in x.data_mut().chunks_mut(d) {
            for c in 0..d {
                row[c] = if var[c] > 0.0 {
                    (row[c] - mean[c]) / var[c].sqrt()
                } else {
                    0.0
                };
            }
        }
    };
    for x in others.iter_mut() {
        apply(x);
    }
    apply(reference);
}

/// Splits `table` into support, probe-train and query rows, stratified by
/// class.
///
/// Split sizes are `round(n·support_fraction)`, `round(n·probe_fraction)`
/// and the remainder. Per-class counts are apportioned by largest remainder
/// (remainder ties go to the earlier split), so each split's class count is
/// within one row of its proportional share. Within a class, rows are
/// ordered by a random key with ties broken by the lower row index, then
/// dealt to support, probe-train and query in turn.
pub fn split_episode<R: Rng + ?Sized>(
    table: &Table,
    config: &SplitConfig,
    rng: &mut R,
) -> Result<Episode, SplitError> {
    config.validate()?;
    let n = table.n_rows();
    let counts = table.class_counts();
    let m_support = (n as f64 * config.support_fraction).round() as usize;
    let m_probe = ((n as f64 * config.probe_fraction).round() as usize).min(n - m_support.min(n));
    let m_support = m_support.min(n);
    let sizes = [m_support, m_probe, n - m_support - m_probe];

    let positives = apportion(counts[1], sizes, n);
    let per_split: [[usize; 2]; 3] =
        std::array::from_fn(|s| [sizes[s] - positives[s], positives[s]]);
    const NAMES: [&str; 3] = ["support", "probe-train", "query"];
    for (s, have) in per_split.iter().enumerate() {
        if have[0] < 2 || have[1] < 2 {
            return Err(SplitError::TooSmall {
                table: table.name.clone(),
                counts,
                split: NAMES[s],
                have: *have,
            });
        }
    }

    let keys: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..2u8 {
        let mut rows: Vec<usize> = (0..n).filter(|&r| table.labels[r] == class).collect();
        rows.sort_by_key(|&r| (keys[r], r));
        let mut it = rows.into_iter();
        for (s, part) in parts.iter_mut().enumerate() {
            part.extend(it.by_ref().take(per_split[s][class as usize]));
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    let [support, probe, query] = parts;
    let take = |idx: &[usize]| {
        (
            table.features.select_rows(idx),
            idx.iter().map(|&r| table.labels[r]).collect::<Vec<u8>>(),
        )
    };
    let (support_x, support_y) = take(&support);
    let (probe_x, probe_y) = take(&probe);
    let (query_x, query_y) = take(&query);
    debug_assert_eq!(count_classes(&support_y), per_split[0]);
    Ok(Episode {
        name: table.name.clone(),
        support,
        probe,
        query,
        support_x,
        support_y,
        probe_x,
        probe_y,
        query_x,
        query_y,
    })
}

/// Distributes `count` items over splits proportionally to `sizes / total`
/// with the largest-remainder rule.
fn apportion(count: usize, sizes: [usize; 3], total: usize) -> [usize; 3] {
    let quota = |s: usize| sizes[s] as f64 * count as f64 / total as f64;
    let mut out: [usize; 3] = std::array::from_fn(|s| quota(s).floor() as usize);
    let mut left = count - out.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quota(a) - quota(a).floor();
        let rb = quota(b) - quota(b).floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[s] < sizes[s] {
            out[s] += 1;
            left -= 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn table(labels: Vec<u8>) -> Table {
        let n = labels.len();
        let x = Tensor::matrix(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap();
        Table::new("t", x, labels)
    }

    #[test]
    fn hundred_rows_forty_twenty_forty() {
        let t = table((0..100).map(|i| (i % 2) as u8).collect());
        let e = split_episode(
            &t,
            &SplitConfig {
                support_fraction: 0.4,
                probe_fraction: 0.2,
            },
            &mut seed::rng(1),
        )
        .unwrap();
        assert_eq!((e.support.len(), e.probe.len(), e.query.len()), (40, 20, 40));
        let mut all: Vec<usize> = [&e.support[..], &e.probe[..], &e.query[..]].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn default_probe_matches_support() {
        let c = SplitConfig::default();
        assert_eq!(c.support_fraction, c.probe_fraction);
        let t = table((0..60).map(|i| (i % 3 == 0) as u8).collect());
        let e = split_episode(&t, &c, &mut seed::rng(2)).unwrap();
        assert_eq!(e.support.len(), e.probe.len());
    }

    #[test]
    fn bad_fractions_and_tiny_tables() {
        let t = table(vec![0, 1, 0, 1, 0, 1]);
        for (s, p) in [(0.0, 0.3), (0.6, 0.4), (0.5, 1.0)] {
            let c = SplitConfig {
                support_fraction: s,
                probe_fraction: p,
            };
            assert!(matches!(
                split_episode(&t, &c, &mut seed::rng(0)),
                Err(SplitError::Fractions { .. })
            ));
        }
        assert!(matches!(
            split_episode(&t, &SplitConfig::default(), &mut seed::rng(0)),
            Err(SplitError::TooSmall { .. })
        ));
    }

    #[test]
    fn apportion_is_within_one_of_quota() {
        assert_eq!(apportion(50, [40, 20, 40], 100), [20, 10, 20]);
        let a = apportion(7, [3, 3, 4], 10);
        assert_eq!(a.iter().sum::<usize>(), 7);
        for (s, size) in [3usize, 3, 4].iter().enumerate() {
            let q = *size as f64 * 0.7;
            assert!((a[s] as f64 - q).abs() < 1.0);
        }
    }

    #[test]
    fn support_standardization_uses_support_stats() {
        let t = table((0..40).map(|i| (i % 2) as u8).collect());
        let mut e = split_episode(&t, &SplitConfig::default(), &mut seed::rng(3)).unwrap();
        e.standardize_by_support();
        for c in 0..2 {
            let col: Vec<f64> = (0..e.support_x.rows()).map(|r| e.support_x.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}
