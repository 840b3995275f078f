use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use siri_bench::dataset;
use siri_core::chunker::{boundaries, ChunkConfig};
use siri_core::{Meta, RootHandle, Store, StructureKind};

const N: usize = 10_000;

fn lookups(c: &mut Criterion) {
    let data = dataset(N, 7).unwrap();
    let mut group = c.benchmark_group("lookup");
    for kind in StructureKind::ALL {
        let store = Store::new();
        let root = RootHandle::build(&store, Meta::default_for(kind), &data).unwrap();
        let mut i = 0;
        group.bench_function(kind.name(), |b| {
            b.iter(|| {
                i = (i + 7919) % data.len();
                black_box(root.lookup(&store, &data[i].key).unwrap())
            })
        });
    }
    group.finish();
}

fn inserts(c: &mut Criterion) {
    let data = dataset(N + 1000, 7).unwrap();
    let (base, extra) = data.split_at(N);
    let mut group = c.benchmark_group("insert");
    for kind in StructureKind::ALL {
        let store = Store::new();
        let root = RootHandle::build(&store, Meta::default_for(kind), base).unwrap();
        let mut i = 0;
        group.bench_function(kind.name(), |b| {
            b.iter_batched(
                || {
                    i = (i + 1) % extra.len();
                    &extra[i]
                },
                |e| black_box(root.insert(&store, &e.key, &e.value).unwrap()),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn chunking(c: &mut Criterion) {
    let bytes: Vec<u8> = dataset(2000, 3)
        .unwrap()
        .into_iter()
        .flat_map(|e| e.key.into_iter().chain(e.value))
        .collect();
    let cfg = ChunkConfig::new(12);
    c.bench_function("chunker/boundaries", |b| {
        b.iter(|| black_box(boundaries(&bytes, &cfg).unwrap()))
    });
}

criterion_group!(benches, lookups, inserts, chunking);
criterion_main!(benches);
