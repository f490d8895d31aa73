use std::collections::BTreeMap;

use proptest::prelude::*;
use saft_core::datasets::{encode_idx, parse_idx};
use saft_core::sensitivity::{average_ranks, spearman, LayerSensitivity, RunningStats};
use saft_core::tensor::{conv2d, conv_out_size, matmul};
use saft_core::{
    compute_stats, kl_sensitivity, select_top_k, LabeledBatch, LayerSpec, ModelGraph, NoiseMode,
    NoiseSpec, NoisyModel, SensitivityReport, StatsOptions, Tensor,
};

fn mlp(widths: &[usize], seed: u64) -> ModelGraph {
    let mut specs = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        if i > 0 {
            specs.push(LayerSpec::relu(format!("r{i}")));
        }
        specs.push(LayerSpec::linear(format!("fc{i}"), w[0], w[1]));
    }
    ModelGraph::build(specs, &[widths[0]], seed).unwrap()
}

fn widths() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 2..5)
}

fn batch_for(width: usize, rows: usize, seed: u64) -> Tensor {
    let data = (0..rows * width)
        .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64 / 250.0 - 2.0)
        .collect();
    Tensor::new(vec![rows, width], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_output_size_formula(input in 1usize..12, kernel in 1usize..6, stride in 1usize..4, padding in 0usize..3) {
        let expected = if kernel > input + 2 * padding {
            None
        } else {
            Some((input + 2 * padding - kernel) / stride + 1)
        };
        prop_assert_eq!(conv_out_size(input, kernel, stride, padding), expected);
    }

    #[test]
    fn conv_shape_matches_formula(c in 1usize..3, f in 1usize..3, h in 2usize..7, k in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
        prop_assume!(k <= h + 2 * pad);
        let x = Tensor::ones(&[2, c, h, h]);
        let w = Tensor::ones(&[f, c, k, k]);
        let y = conv2d(&x, &w, stride, pad).unwrap();
        let o = conv_out_size(h, k, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[2, f, o, o][..]);
    }

    #[test]
    fn identity_matmul_is_exact(rows in 1usize..5, cols in 1usize..5, seed in 0u64..100) {
        let a = batch_for(cols, rows, seed);
        let mut eye = Tensor::zeros(&[cols, cols]);
        for i in 0..cols {
            eye.data_mut()[i * cols + i] = 1.0;
        }
        prop_assert_eq!(matmul(&a, &eye).unwrap(), a);
    }

    #[test]
    fn welford_merge_equals_single_pass(xs in prop::collection::vec(-100.0f64..100.0, 1..60), split in 0usize..60) {
        let split = split.min(xs.len());
        let mut all = RunningStats::new();
        all.extend(&xs);
        let mut a = RunningStats::new();
        a.extend(&xs[..split]);
        let mut b = RunningStats::new();
        b.extend(&xs[split..]);
        let merged = a.merge(&b);
        prop_assert_eq!(merged.count(), all.count());
        prop_assert!((merged.mean() - all.mean()).abs() <= 1e-9 * (1.0 + all.mean().abs()));
        prop_assert!((merged.variance() - all.variance()).abs() <= 1e-8 * (1.0 + all.variance()));
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((all.variance() - var).abs() <= 1e-8 * (1.0 + var));
    }

    #[test]
    fn average_ranks_sum_is_triangular(xs in prop::collection::vec(-5i32..5, 1..30)) {
        let v: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
        let r = average_ranks(&v);
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(r[i] < r[j]);
                }
            }
        }
    }

    #[test]
    fn spearman_bounded_and_symmetric(pairs in prop::collection::vec((-10i32..10, -10i32..10), 2..25)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let ab = spearman(&a, &b).unwrap();
        let ba = spearman(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        if let Some(r) = ab {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
        if let Some(r) = spearman(&a, &a).unwrap() {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_is_sorted_with_index_ties(stds in prop::collection::vec(0u8..4, 1..12)) {
        let layers = stds
            .iter()
            .enumerate()
            .map(|(i, &s)| LayerSensitivity {
                id: format!("l{i}"),
                index: i,
                kind: "linear".into(),
                eligible: true,
                std: s as f64,
                kl: None,
            })
            .collect();
        let r = SensitivityReport::from_layers(layers, 1);
        let idx: Vec<usize> = r.ranking().iter().map(|id| r.get(id).unwrap().index).collect();
        for w in idx.windows(2) {
            let (a, b) = (stds[w[0]], stds[w[1]]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }

    #[test]
    fn top_k_partitions_layers(w in widths(), k in 1usize..6, seed in 0u64..50) {
        let m = mlp(&w, seed);
        let view = NoisyModel::new(&m, NoiseSpec::gaussian(0.1, NoiseMode::Additive, seed)).unwrap();
        let mut r = compute_stats(&m, &view, &batch_for(w[0], 4, seed), &StatsOptions::default()).unwrap();
        let plan = select_top_k(&mut r, k).unwrap();
        let ids: Vec<String> = m.layers().iter().map(|l| l.id().to_string()).collect();
        prop_assert_eq!(plan.trainable().len(), k.min(m.eligible_ids().len()));
        prop_assert!(plan.trainable().is_disjoint(plan.frozen()));
        prop_assert_eq!(plan.trainable().len() + plan.frozen().len(), ids.len());
        for id in plan.trainable() {
            prop_assert!(r.ranking()[..k.min(r.ranking().len())].contains(id));
        }
    }

    #[test]
    fn zero_noise_is_the_clean_model(w in widths(), seed in 0u64..50, additive in any::<bool>()) {
        let m = mlp(&w, seed);
        let mode = if additive { NoiseMode::Additive } else { NoiseMode::Multiplicative };
        let view = NoisyModel::new(&m, NoiseSpec::uniform(0.0, mode, seed)).unwrap();
        let x = batch_for(w[0], 3, seed);
        prop_assert_eq!(view.forward_at(&x, seed).unwrap(), m.forward(&x).unwrap());
        let r = compute_stats(&m, &view, &x, &StatsOptions::default()).unwrap();
        prop_assert!(r.layers().iter().all(|l| l.std == 0.0));
    }

    #[test]
    fn noisy_forward_replays_per_step(w in widths(), seed in 0u64..50, step in 0u64..1000) {
        let m = mlp(&w, seed);
        let view = NoisyModel::new(&m, NoiseSpec::gaussian(0.2, NoiseMode::Multiplicative, seed)).unwrap();
        let x = batch_for(w[0], 2, seed);
        prop_assert_eq!(view.forward_at(&x, step).unwrap(), view.forward_at(&x, step).unwrap());
    }

    #[test]
    fn kl_is_non_negative(w in widths(), seed in 0u64..50, sigma in 0.0f64..0.5) {
        let m = mlp(&w, seed);
        let view = NoisyModel::new(&m, NoiseSpec::gaussian(sigma, NoiseMode::Multiplicative, seed)).unwrap();
        let kl = kl_sensitivity(&m, &view, &batch_for(w[0], 16, seed), 32).unwrap();
        prop_assert!(kl.values().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn checkpoint_round_trips_bitwise(w in widths(), seed in 0u64..1000) {
        let m = mlp(&w, seed);
        let bytes = m.save_checkpoint();
        let back = ModelGraph::load_checkpoint(&bytes).unwrap();
        prop_assert!(m == back);
        prop_assert_eq!(back.save_checkpoint(), bytes);
    }

    #[test]
    fn idx_round_trips(n in 1usize..8, h in 1usize..5, w in 1usize..5, seed in 0u64..100) {
        let pixels: Vec<f64> = (0..n * h * w).map(|i| ((i as u64 * 31 + seed) % 256) as f64 / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 10).collect();
        let batch = LabeledBatch::new(Tensor::new(vec![n, 1, h, w], pixels).unwrap(), labels, 10).unwrap();
        let (img, lab) = encode_idx(&batch).unwrap();
        let back = parse_idx(&img, &lab).unwrap();
        prop_assert_eq!(back.inputs(), batch.inputs());
        prop_assert_eq!(back.labels(), batch.labels());
    }

    #[test]
    fn truncated_checkpoints_error_not_panic(w in widths(), cut in 0usize..400) {
        let bytes = mlp(&w, 1).save_checkpoint();
        prop_assume!(cut < bytes.len());
        prop_assert!(ModelGraph::load_checkpoint(&bytes[..cut]).is_err());
    }
}

#[test]
fn rank_agreement_of_identical_scores_is_one() {
    let a: BTreeMap<String, f64> = [("x", 3.0), ("y", 1.0), ("z", 2.0)]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    assert_eq!(saft_core::rank_agreement(&a, &a).unwrap(), Some(1.0));
}
