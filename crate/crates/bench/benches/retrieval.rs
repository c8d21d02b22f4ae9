use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use fedca_bench::{client_centers, planted};
use fedca_core::augment::{direct_retrieval_augment, retrieve_topk, DEFAULT_ALPHA};
use fedca_core::geometry::coverage;
use fedca_core::SimilarityMode;

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieve_topk");
    for scale in [0.25f64, 1.0] {
        let data = planted(scale, 0);
        let query = data.directions[0].clone();
        group.throughput(Throughput::Elements(data.pool.len() as u64));
        group.bench_with_input(BenchmarkId::from_parameter(data.pool.len()), &data, |b, d| {
            b.iter(|| retrieve_topk(&d.pool, &query, 1000, Some(DEFAULT_ALPHA)).unwrap())
        });
    }
    group.finish();

    let data = planted(0.25, 0);
    let centers = client_centers(&data, 10, 10, 0);
    let mut group = c.benchmark_group("augment");
    group.sample_size(10);
    group.bench_function("direct_retrieval/10x10", |b| {
        b.iter(|| direct_retrieval_augment(&data.pool, &centers, 1000).unwrap())
    });
    group.finish();

    let reference = data.domain.vectors();
    let covering: Vec<&[f32]> = data.pool.vectors().into_iter().take(2000).collect();
    let mut group = c.benchmark_group("coverage");
    group.sample_size(10);
    group.throughput(Throughput::Elements((reference.len() * covering.len()) as u64));
    group.bench_function("domain_x_2000", |b| {
        b.iter(|| coverage(&reference, &covering, SimilarityMode::RawCosine).unwrap())
    });
    group.finish();
}

criterion_group!(benches, retrieval);
criterion_main!(benches);
