use layerlab::episode::{split_episode, SplitConfig, SplitError};
use layerlab::seed;
use layerlab::table::Table;
use layerlab::tensor::Tensor;
use proptest::prelude::*;

fn table(n: usize, positives: usize) -> Table {
    let x = Tensor::matrix(n, 2, (0..2 * n).map(|i| i as f64).collect()).unwrap();
    let labels = (0..n).map(|i| u8::from(i < positives)).collect();
    Table::new("t", x, labels)
}

proptest! {
    #[test]
    fn split_partitions_and_stratifies(
        n in 24usize..200,
        pos_frac in 0.25f64..0.75,
        support in 0.2f64..0.45,
        probe in 0.2f64..0.45,
        s in any::<u64>(),
    ) {
        let positives = ((n as f64 * pos_frac) as usize).clamp(8, n - 8);
        let t = table(n, positives);
        let config = SplitConfig { support_fraction: support, probe_fraction: probe };
        let ep = match split_episode(&t, &config, &mut seed::rng(s)) {
            Ok(ep) => ep,
            Err(SplitError::TooSmall { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let mut all: Vec<usize> = ep.support.iter().chain(&ep.probe).chain(&ep.query).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(ep.support.len(), (n as f64 * support).round() as usize);
        prop_assert_eq!(ep.probe.len(), (n as f64 * probe).round() as usize);
        for (rows, labels) in [(&ep.support, &ep.support_y), (&ep.probe, &ep.probe_y), (&ep.query, &ep.query_y)] {
            let pos = labels.iter().filter(|&&l| l == 1).count();
            let share = rows.len() as f64 * positives as f64 / n as f64;
            prop_assert!((pos as f64 - share).abs() < 1.0, "{} positives vs share {}", pos, share);
            prop_assert!(pos >= 2 && rows.len() - pos >= 2);
            for (&r, &l) in rows.iter().zip(labels.iter()) {
                prop_assert_eq!(t.labels[r], l);
            }
        }
    }

    #[test]
    fn split_is_a_pure_function_of_the_rng(n in 30usize..100, s in any::<u64>()) {
        let t = table(n, n / 2);
        let a = split_episode(&t, &SplitConfig::default(), &mut seed::rng(s)).unwrap();
        let b = split_episode(&t, &SplitConfig::default(), &mut seed::rng(s)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn support_standardization_uses_support_statistics() {
    let t = table(60, 30);
    let mut ep = split_episode(&t, &SplitConfig::default(), &mut seed::rng(1)).unwrap();
    ep.standardize_by_support();
    let (n, d) = (ep.support_x.rows(), ep.support_x.cols());
    for c in 0..d {
        let col: Vec<f64> = (0..n).map(|r| ep.support_x.get(r, c)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bad_fractions_and_tiny_tables_are_errors() {
    let t = table(40, 20);
    let bad = SplitConfig { support_fraction: 0.6, probe_fraction: 0.5 };
    assert!(matches!(split_episode(&t, &bad, &mut seed::rng(0)), Err(SplitError::Fractions { .. })));
    let tiny = table(8, 2);
    assert!(matches!(
        split_episode(&tiny, &SplitConfig::default(), &mut seed::rng(0)),
        Err(SplitError::TooSmall { .. })
    ));
}
