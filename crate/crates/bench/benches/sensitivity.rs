use criterion::{criterion_group, criterion_main, Criterion};
use saft_core::{
    brute_force_oracle, compute_stats, gen_blobs, LayerSpec, ModelGraph, NoiseMode, NoiseSpec,
    NoisyModel, OracleMetric, StatsOptions,
};

fn cnn() -> ModelGraph {
    ModelGraph::build(
        vec![
            LayerSpec::conv2d("conv1", 1, 8, 3, 1, 1),
            LayerSpec::relu("relu1"),
            LayerSpec::conv2d("conv2", 8, 16, 3, 1, 1),
            LayerSpec::relu("relu2"),
            LayerSpec::conv2d("conv3", 16, 16, 3, 2, 1),
            LayerSpec::relu("relu3"),
            LayerSpec::flatten("flat"),
            LayerSpec::linear("fc1", 64, 32),
            LayerSpec::relu("relu4"),
            LayerSpec::linear("fc2", 32, 4),
            LayerSpec::relu("relu5"),
            LayerSpec::linear("fc3", 4, 4),
        ],
        &[1, 4, 4],
        1,
    )
    .expect("valid model")
}

/// One sensitivity pass against the per-layer brute-force oracle on the same data.
fn sensitivity_vs_oracle(c: &mut Criterion) {
    let data = gen_blobs(4, 100, 16, 0.5, 7)
        .and_then(|d| d.reshape_samples(&[1, 4, 4]))
        .expect("valid blobs");
    let model = cnn();
    let spec = NoiseSpec::gaussian(0.3, NoiseMode::Multiplicative, 11);
    let x = data.test.inputs().clone();

    let mut group = c.benchmark_group("layer_ranking");
    group.sample_size(20);
    group.bench_function("compute_stats", |b| {
        let view = NoisyModel::new(&model, spec).unwrap();
        b.iter(|| compute_stats(&model, &view, &x, &StatsOptions::default()).unwrap())
    });
    group.bench_function("brute_force_oracle", |b| {
        b.iter(|| brute_force_oracle(&model, &spec, &data.test, OracleMetric::Accuracy).unwrap())
    });
    group.finish();
}

criterion_group!(benches, sensitivity_vs_oracle);
criterion_main!(benches);
