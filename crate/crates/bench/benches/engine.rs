use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hwbp::engine::{compute_gradients, run_forward, Algorithm};
use hwbp_bench::model_and_batch;

fn gradient_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradient_step");
    group.sample_size(20);
    for preset in ["gru", "plain"] {
        let (model, batch) = model_and_batch(preset, 64, 32, 16);
        group.bench_function(BenchmarkId::new(format!("{preset}/forward"), 0), |b| {
            b.iter(|| run_forward(&model, &batch).unwrap())
        });
        group.bench_function(BenchmarkId::new(format!("{preset}/backprop"), 0), |b| {
            b.iter(|| compute_gradients(&model, &batch, Algorithm::Backprop).unwrap())
        });
        for k in [0, 1, 2, 5, 10] {
            group.bench_with_input(BenchmarkId::new(format!("{preset}/highway"), k), &k, |b, &k| {
                b.iter(|| compute_gradients(&model, &batch, Algorithm::Highway(k)).unwrap())
            });
        }
        group.bench_with_input(BenchmarkId::new(format!("{preset}/fpi"), 2), &2, |b, &k| {
            b.iter(|| compute_gradients(&model, &batch, Algorithm::Fpi(k)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradient_step);
criterion_main!(benches);
