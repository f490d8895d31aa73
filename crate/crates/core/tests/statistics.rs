//! Sampling behaviour of the sensitivity estimators on models with known answers.

use saft_core::sensitivity::AccumulateOptions;
use saft_core::{
    accumulate_stats, compute_stats, gen_blobs, kl_sensitivity, LayerSpec, ModelGraph, NoiseMode,
    NoiseSpec, NoisyModel, StatsOptions, Tensor,
};

fn single_linear(weights: &[f64]) -> ModelGraph {
    let mut m = ModelGraph::build(vec![LayerSpec::linear("fc", weights.len(), 1)], &[weights.len()], 0).unwrap();
    let w = Tensor::new(vec![weights.len(), 1], weights.to_vec()).unwrap();
    m.set_params(0, vec![w, Tensor::zeros(&[1])]).unwrap();
    m
}

fn pooled_std(m: &ModelGraph, spec: NoiseSpec, x: &Tensor, repeats: usize) -> f64 {
    let view = NoisyModel::new(m, spec).unwrap();
    let r = compute_stats(m, &view, x, &StatsOptions { repeats }).unwrap();
    r.get("fc").unwrap().std
}

fn within(actual: f64, expected: f64, rel: f64) -> bool {
    (actual - expected).abs() <= rel * expected
}

#[test]
fn gaussian_multiplicative_std_matches_closed_form() {
    let m = single_linear(&[1.0, 2.0]);
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let sigma = 0.1;
    let got = pooled_std(&m, NoiseSpec::gaussian(sigma, NoiseMode::Multiplicative, 5), &x, 20_000);
    let expected = sigma * 5f64.sqrt();
    assert!(within(got, expected, 0.03), "got {got}, expected {expected}");
}

#[test]
fn gaussian_additive_std_ignores_weight_scale() {
    let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
    let sigma = 0.2;
    let expected = sigma * (1.0f64 + 4.0 + 0.25).sqrt();
    for w in [[1.0, 1.0, 1.0], [10.0, -3.0, 0.1]] {
        let got = pooled_std(&single_linear(&w), NoiseSpec::gaussian(sigma, NoiseMode::Additive, 2), &x, 20_000);
        assert!(within(got, expected, 0.03), "weights {w:?}: got {got}, expected {expected}");
    }
}

#[test]
fn uniform_multiplicative_std_matches_closed_form() {
    let m = single_linear(&[3.0, -1.0]);
    let x = Tensor::new(vec![1, 2], vec![0.5, 2.0]).unwrap();
    let r1 = 0.3;
    let got = pooled_std(&m, NoiseSpec::uniform(r1, NoiseMode::Multiplicative, 8), &x, 20_000);
    let expected = r1 / 3f64.sqrt() * (2.25f64 + 4.0).sqrt();
    assert!(within(got, expected, 0.03), "got {got}, expected {expected}");
}

#[test]
fn doubling_sigma_doubles_std() {
    let m = single_linear(&[0.7, -1.3, 2.1]);
    let x = Tensor::new(vec![2, 3], vec![1.0, 0.5, -1.0, 0.2, 1.0, 1.5]).unwrap();
    let one = pooled_std(&m, NoiseSpec::gaussian(0.1, NoiseMode::Multiplicative, 4), &x, 10_000);
    let two = pooled_std(&m, NoiseSpec::gaussian(0.2, NoiseMode::Multiplicative, 4), &x, 10_000);
    assert!((two / one - 2.0).abs() < 0.06, "ratio {}", two / one);
}

fn blob_mlp() -> (ModelGraph, Tensor) {
    let data = gen_blobs(3, 40, 6, 0.5, 1).unwrap();
    let m = ModelGraph::build(
        vec![
            LayerSpec::linear("fc1", 6, 8),
            LayerSpec::relu("r1"),
            LayerSpec::linear("fc2", 8, 3),
        ],
        &[6],
        3,
    )
    .unwrap();
    (m, data.train.slice(0, 64).unwrap().inputs().clone())
}

#[test]
fn streaming_singletons_match_the_batch() {
    let (m, x) = blob_mlp();
    let view = NoisyModel::new(&m, NoiseSpec::gaussian(0.2, NoiseMode::Multiplicative, 6)).unwrap();
    let batch = compute_stats(&m, &view, &x, &StatsOptions::default()).unwrap();
    let rows: Vec<Tensor> = (0..x.rows()).map(|i| x.slice_rows(i, i + 1).unwrap()).collect();
    let streamed = accumulate_stats(&m, &view, &rows, &AccumulateOptions::default()).unwrap();
    for (a, b) in batch.layers().iter().zip(streamed.layers()) {
        assert!((a.std - b.std).abs() <= 1e-9, "{}: {} vs {}", a.id, a.std, b.std);
    }
    assert_eq!(batch.ranking(), streamed.ranking());
}

#[test]
fn redrawn_noise_converges_to_the_analytic_std() {
    let m = single_linear(&[1.0, 2.0]);
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let view = NoisyModel::new(&m, NoiseSpec::gaussian(0.1, NoiseMode::Multiplicative, 12)).unwrap();
    let samples = vec![x; 20_000];
    let r = accumulate_stats(&m, &view, &samples, &AccumulateOptions { redraw_per_sample: true }).unwrap();
    let expected = 0.1 * 5f64.sqrt();
    let got = r.get("fc").unwrap().std;
    assert!(within(got, expected, 0.03), "got {got}, expected {expected}");
}

#[test]
fn kl_grows_with_noise() {
    let (m, x) = blob_mlp();
    let kl = |sigma| {
        let view = NoisyModel::new(&m, NoiseSpec::gaussian(sigma, NoiseMode::Multiplicative, 9)).unwrap();
        kl_sensitivity(&m, &view, &x, 16).unwrap()
    };
    let (low, high) = (kl(0.1), kl(0.4));
    for id in ["fc1", "fc2"] {
        assert!(high[id] > low[id], "{id}: {} !> {}", high[id], low[id]);
    }
}
