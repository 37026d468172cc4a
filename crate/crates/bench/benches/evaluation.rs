use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use idiomkit_bench::{grouped_bank, random_vectors};
use idiomkit_core::bank::nearest_idioms;
use idiomkit_core::eval::{agglomerative_cluster, homogeneity_score, precision_at_k};

fn clustering(c: &mut Criterion) {
    let mut group = c.benchmark_group("complete_linkage");
    for n in [64, 129, 256] {
        let vectors = random_vectors(n, 64, 1);
        let refs: Vec<&[f32]> = vectors.iter().map(Vec::as_slice).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &refs, |b, refs| {
            b.iter(|| agglomerative_cluster(black_box(refs), 20).unwrap())
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let (bank, groups) = grouped_bank(1500, 768, 20, 2);
    c.bench_function("nearest_idioms/1500x768", |b| {
        b.iter(|| nearest_idioms(black_box(&bank), "idiom0042", 3).unwrap())
    });
    let (small, small_groups) = grouped_bank(129, 768, 20, 3);
    c.bench_function("precision_at_3/129x768", |b| {
        b.iter(|| precision_at_k(black_box(&small), &small_groups, 3).unwrap())
    });
    let classes: Vec<usize> = (0..groups.idiom_count()).map(|i| i % 20).collect();
    let clusters: Vec<usize> = (0..classes.len()).map(|i| (i * 7) % 23).collect();
    c.bench_function("homogeneity/1500", |b| {
        b.iter(|| homogeneity_score(black_box(&classes), black_box(&clusters)).unwrap())
    });
}

criterion_group!(benches, clustering, retrieval);
criterion_main!(benches);
