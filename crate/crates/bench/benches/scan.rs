use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hwbp::{cumsumprod_par, cumsumprod_seq};
use hwbp_bench::diagonal_chain;

fn scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("cumsumprod");
    for n in [16, 128, 1024] {
        let (a, chain) = diagonal_chain(n, 64 * 32, 0);
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |b, _| {
            b.iter(|| cumsumprod_seq(&a, &chain).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("hillis_steele", n), &n, |b, _| {
            b.iter(|| cumsumprod_par(a.clone(), &chain).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, scan);
criterion_main!(benches);
