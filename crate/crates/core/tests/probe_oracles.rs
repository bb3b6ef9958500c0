mod common;

use common::*;
use layerlab::exec::Execution;
use layerlab::model::{Model, Variant};
use layerlab::probe::{transfer_matrix, DecoderProbe, KnnProbe, LinearProbe, ProbeConfig, ProbeKind};
use layerlab::seed;
use layerlab::surgery::LayerPlan;
use layerlab::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn logistic_problem(seed: u64, n: usize, d: usize) -> (Tensor, Vec<u8>) {
    let mut rng = seed::rng(seed);
    let x = random_tensor(&mut rng, vec![n, d]);
    let mut y: Vec<u8> = (0..n)
        .map(|r| {
            let t: f64 = x.row(r).iter().enumerate().map(|(c, v)| v * (c as f64 - 1.0)).sum();
            u8::from(rng.gen::<f64>() < 1.0 / (1.0 + (-t).exp()))
        })
        .collect();
    y[0] = 0;
    y[1] = 1;
    (x, y)
}

#[test]
fn linear_probe_matches_newton_solution() {
    for (i, reg) in [1e-4, 1e-2, 1.0].into_iter().enumerate() {
        let (x, y) = logistic_problem(i as u64, 60, 4);
        let probe = LinearProbe::fit(&x, &y, reg, 0).unwrap();
        let (w, b) = irls_logistic(&x, &y, reg);
        for (a, o) in probe.weights.iter().zip(&w) {
            assert!((a - o).abs() < 1e-4, "reg {reg}: {a} vs {o}");
        }
        assert!((probe.intercept - b).abs() < 1e-4);
    }
}

#[test]
fn linear_probe_handles_constant_columns() {
    let (mut x, y) = logistic_problem(9, 40, 3);
    for r in 0..40 {
        x.data_mut()[r * 3 + 1] = 2.5;
    }
    let probe = LinearProbe::fit(&x, &y, 1e-3, 0).unwrap();
    assert_eq!(probe.weights[1], 0.0);
    assert!(probe.score(&x).unwrap().iter().all(|s| s.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_brute_force(
        seed in any::<u64>(),
        n in 1usize..40,
        d in 1usize..4,
        k in 1usize..8,
    ) {
        let mut rng = seed::rng(seed);
        let grid = |rng: &mut seed::Rng, rows: usize| {
            Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.gen_range(-2..=2) as f64).collect()).unwrap()
        };
        let x = grid(&mut rng, n);
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let probe = KnnProbe::fit(&x, &y, k, 0).unwrap();
        let q = grid(&mut rng, 10);
        let scores = probe.score(&q).unwrap();
        let kk = k.min(n);
        for r in 0..10 {
            let nn = brute_neighbors(&x, q.row(r), kk);
            prop_assert_eq!(probe.neighbors(q.row(r)), nn.clone());
            let expect = nn.iter().filter(|&&i| y[i] == 1).count() as f64 / kk as f64;
            prop_assert_eq!(scores[r], expect);
        }
    }
}

#[test]
fn zero_step_decoder_probe_is_the_frozen_decoder() {
    for v in [Variant::Row, Variant::Dual, Variant::TwoStage] {
        let model = Model::build(small_config(v, 2)).unwrap();
        let ep = episode(12, (3, 6), (50, 70));
        let stack = model.extract_embeddings(&ep, &LayerPlan::identity(4).unwrap()).unwrap();
        for layer in 0..4 {
            let probe = DecoderProbe::fit(&model.decoder_weights(), &stack.train_part(layer + 1), stack.train_labels(), 0, 1e-3, layer + 1)
                .unwrap();
            assert!(probe.losses.is_empty());
            let exit = model.forward_early_exit(&ep, layer, None).unwrap();
            let ours = probe.logits(&stack.eval_part(layer + 1)).unwrap();
            assert!(ours.data().iter().zip(exit.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn decoder_fine_tuning_lowers_training_loss() {
    let model = Model::build(small_config(Variant::Row, 3)).unwrap();
    let ep = episode(13, (3, 6), (80, 100));
    let stack = model.extract_embeddings(&ep, &LayerPlan::identity(4).unwrap()).unwrap();
    let probe = DecoderProbe::fit(&model.decoder_weights(), &stack.train_part(4), stack.train_labels(), 200, 1e-3, 4).unwrap();
    let l = &probe.losses;
    assert_eq!(l.len(), 200);
    let head = l[..20].iter().sum::<f64>() / 20.0;
    let tail = l[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn probe_rows_are_disjoint_from_support_and_query() {
    let ep = episode(14, (3, 3), (90, 90));
    let mut all: Vec<usize> = ep.support.iter().chain(&ep.probe).chain(&ep.query).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..90).collect::<Vec<_>>());
    let model = Model::build(small_config(Variant::Row, 4)).unwrap();
    let stack = model.extract_embeddings(&ep, &LayerPlan::identity(4).unwrap()).unwrap();
    assert_eq!(stack.train_rows, ep.probe.len());
    assert_eq!(stack.train_labels(), ep.probe_y.as_slice());
    assert_eq!(stack.eval_labels(), ep.query_y.as_slice());
}

#[test]
fn transfer_matrix_is_square_and_sequential_equals_parallel() {
    let model = Model::build(small_config(Variant::Row, 5)).unwrap();
    let ep = episode(15, (3, 5), (80, 100));
    let stack = model.extract_embeddings(&ep, &LayerPlan::identity(4).unwrap()).unwrap();
    let config = ProbeConfig::default();
    for kind in [ProbeKind::Linear, ProbeKind::Knn, ProbeKind::Decoder] {
        let seq = transfer_matrix(&stack, kind, &config, &model.decoder_weights(), Execution::Sequential);
        let par = transfer_matrix(&stack, kind, &config, &model.decoder_weights(), Execution::Parallel);
        assert_eq!(seq, par);
        assert_eq!(seq.size(), 5);
        assert!(seq.values.iter().flatten().all(|v| v.is_some_and(|a| (0.0..=1.0).contains(&a))));
    }
}
