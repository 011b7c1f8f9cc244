//! Parallel vs sequential execution of the data-parallel stages.

use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tus_forge_core::bench::{map_at_k, GroundTruth, PredictionSet};
use tus_forge_core::embed::{embed_tables, EmbeddingRecord, MockProvider, TokenLimits};
use tus_forge_core::index::{HnswParams, Metric, StoreMeta, VectorStore};
use tus_forge_core::serialize::{serialize_tables, MockTokenizer, SamplerConfig};
use tus_forge_core::synth::{generate_lake, SynthConfig};
use tus_forge_core::{Exec, Table};

const MODES: [(&str, Exec); 2] = [
    ("parallel", Exec::Parallel),
    ("sequential", Exec::Sequential),
];

fn lake_tables() -> Vec<Table> {
    let cfg = SynthConfig {
        n_domains: 100,
        tables_per_domain: 2,
        rows: 120,
        ..SynthConfig::default()
    };
    generate_lake(&cfg, Exec::Parallel).unwrap().datalake.tables
}

fn random_store(n: usize, dim: usize, exec: Exec) -> VectorStore {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let meta = StoreMeta::new(dim, Metric::Cosine, "random");
    let records = (0..n).map(|i| EmbeddingRecord {
        table_ref: tus_forge_core::TableRef::new("lake", format!("t{i}")).unwrap(),
        vector: (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        model_id: "random".into(),
    });
    VectorStore::from_records(meta, records)
        .unwrap()
        .with_exec(exec)
}

fn serialize(c: &mut Criterion) {
    let tables = lake_tables();
    let cfg = SamplerConfig::default();
    let mut group = c.benchmark_group("serialize");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| serialize_tables(black_box(&tables), &cfg, 512, &MockTokenizer, exec))
        });
    }
    group.finish();
}

fn embed(c: &mut Criterion) {
    let tables = lake_tables();
    let cfg = SamplerConfig::default();
    let provider =
        MockProvider::new("mock", 256, 0, TokenLimits::new(1024, 8192).unwrap()).unwrap();
    let mut group = c.benchmark_group("embed");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| embed_tables(black_box(&tables), &cfg, &provider, exec).unwrap())
        });
    }
    group.finish();
}

fn search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let queries: Vec<Vec<f32>> = (0..200)
        .map(|_| (0..128).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let mut group = c.benchmark_group("search_many");
    group.sample_size(20);
    for (name, exec) in MODES {
        let store = random_store(5_000, 128, exec);
        for exact in [true, false] {
            let id = format!("{name}/{}", if exact { "exact" } else { "hnsw" });
            group.bench_function(BenchmarkId::from_parameter(id), |b| {
                b.iter(|| {
                    store
                        .search_many(black_box(&queries), 10, exact, None)
                        .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn evaluate(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut preds = PredictionSet::default();
    let mut truth = GroundTruth::new();
    for q in 0..5_000 {
        let ranked: Vec<String> = (0..64)
            .map(|i| format!("t{}", (q * 7 + i * 13) % 1000))
            .collect();
        let ranked: Vec<String> = ranked
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let rel: BTreeSet<String> = (0..10)
            .map(|_| format!("t{}", rng.random_range(0..1000)))
            .collect();
        preds.insert(format!("q{q}"), ranked).unwrap();
        truth.insert(format!("q{q}"), rel);
    }
    let mut group = c.benchmark_group("map_at_k");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_at_k(black_box(&preds), &truth, 64, exec).unwrap())
        });
    }
    group.finish();
}

fn index_build(c: &mut Criterion) {
    let tables = lake_tables();
    let provider =
        MockProvider::new("mock", 256, 0, TokenLimits::new(1024, 8192).unwrap()).unwrap();
    let records = embed_tables(
        &tables,
        &SamplerConfig::default(),
        &provider,
        Exec::Parallel,
    )
    .unwrap();
    let mut group = c.benchmark_group("index_build");
    group.sample_size(10);
    group.bench_function("hnsw", |b| {
        b.iter(|| {
            let mut meta = StoreMeta::new(256, Metric::Cosine, "mock");
            meta.hnsw = HnswParams::default();
            VectorStore::from_records(meta, records.iter().cloned()).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, serialize, embed, search, evaluate, index_build);
criterion_main!(benches);
