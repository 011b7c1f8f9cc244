//! Online phase: a query table goes through the same sampling, serialization
//! and embedding as indexed tables, is searched against the store and then
//! dropped. Query vectors are never inserted.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use crate::embed::{embed_table, embed_tables, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::index::{self, HnswParams, Metric, Neighbor, StoreMeta, VectorStore};
use crate::serialize::SamplerConfig;
use crate::table::{Table, TableRef};

/// Similarity under `metric`; higher is more similar for all three.
/// Euclidean is returned as the negated distance.
pub fn similarity(a: &[f32], b: &[f32], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(index::score(metric, a, b))
}

/// Settings that must be identical between indexing and querying.
pub fn pipeline_fingerprint(
    sampler: &SamplerConfig,
    provider: &dyn EmbeddingProvider,
) -> BTreeMap<String, String> {
    let limits = provider.limits();
    let mut fp = BTreeMap::new();
    fp.insert("sampler.rows".into(), sampler.rows.to_string());
    fp.insert("sampler.seed".into(), sampler.seed.to_string());
    fp.insert("sampler.sep".into(), sampler.sep.clone());
    fp.insert("sampler.newline".into(), sampler.newline.clone());
    fp.insert("provider.model".into(), provider.model_id().to_owned());
    fp.insert(
        "provider.dimension".into(),
        provider.dimension().to_string(),
    );
    fp.insert(
        "provider.tokenizer".into(),
        provider.tokenizer().name().to_owned(),
    );
    fp.insert("provider.limit_n".into(), limits.n.to_string());
    fp.insert("provider.limit_m".into(), limits.m.to_string());
    for (k, v) in provider.settings() {
        fp.insert(format!("provider.{k}"), v);
    }
    fp
}

/// Rejects a sampler/provider pair that differs from what built the store.
pub fn check_symmetry(
    store: &VectorStore,
    sampler: &SamplerConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<()> {
    if provider.dimension() != store.dimension() {
        return Err(Error::Config(format!(
            "provider dimension {} differs from store dimension {}",
            provider.dimension(),
            store.dimension()
        )));
    }
    let expected = &store.meta().config;
    let actual = pipeline_fingerprint(sampler, provider);
    let mismatched: Vec<String> = expected
        .keys()
        .chain(actual.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| expected.get(*k) != actual.get(*k))
        .map(|k| {
            format!(
                "{k}: index={:?} query={:?}",
                expected.get(k).map(String::as_str).unwrap_or("<unset>"),
                actual.get(k).map(String::as_str).unwrap_or("<unset>")
            )
        })
        .collect();
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "query configuration differs from index configuration ({})",
            mismatched.join("; ")
        )))
    }
}

/// Offline phase: embed every table and index it, recording the pipeline
/// fingerprint in the store.
pub fn build_store(
    tables: &[Table],
    sampler: &SamplerConfig,
    provider: &dyn EmbeddingProvider,
    metric: Metric,
    hnsw: HnswParams,
    exec: Exec,
) -> Result<VectorStore> {
    let records = embed_tables(tables, sampler, provider, exec)?;
    let mut meta = StoreMeta::new(provider.dimension(), metric, provider.model_id());
    meta.hnsw = hnsw;
    meta.config = pipeline_fingerprint(sampler, provider);
    Ok(VectorStore::from_records(meta, records)?.with_exec(exec))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryOptions {
    pub k: usize,
    pub metric: Metric,
    pub lakes: Option<BTreeSet<String>>,
    /// Keep the query table itself in the results if it is indexed.
    pub include_self: bool,
    /// Scan exhaustively instead of walking the graph.
    pub exact: bool,
}

impl QueryOptions {
    pub fn top(k: usize) -> Self {
        QueryOptions {
            k,
            metric: Metric::Cosine,
            lakes: None,
            include_self: false,
            exact: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_ref: TableRef,
    pub neighbors: Vec<Neighbor>,
    pub elapsed: Duration,
}

/// Embeds a query table exactly like an indexed one.
pub fn query_vector(
    table: &Table,
    sampler: &SamplerConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<f32>> {
    Ok(embed_table(table, sampler, provider)?.vector)
}

/// Top-k unionable tables for `table`.
pub fn query_topk(
    table: &Table,
    store: &VectorStore,
    provider: &dyn EmbeddingProvider,
    sampler: &SamplerConfig,
    opts: &QueryOptions,
) -> Result<QueryResult> {
    let start = Instant::now();
    if opts.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if opts.metric != store.metric() {
        return Err(Error::Config(format!(
            "store was built for {} similarity, query asked for {}",
            store.metric(),
            opts.metric
        )));
    }
    check_symmetry(store, sampler, provider)?;
    let vector = query_vector(table, sampler, provider)?;
    let drop_self = !opts.include_self && store.contains(&table.table_ref);
    let want = opts.k + usize::from(drop_self);
    let lakes = opts.lakes.as_ref();
    let mut neighbors = if opts.exact {
        store.search_exact(&vector, want, lakes)?
    } else {
        store.search_ann(&vector, want, lakes)?
    };
    if drop_self {
        neighbors.retain(|n| n.table_ref != table.table_ref);
    }
    neighbors.truncate(opts.k);
    Ok(QueryResult {
        query_ref: table.table_ref.clone(),
        neighbors,
        elapsed: start.elapsed(),
    })
}

/// Embeds and inserts one new table without touching existing records.
pub fn add_table_incremental(
    table: &Table,
    store: &mut VectorStore,
    provider: &dyn EmbeddingProvider,
    sampler: &SamplerConfig,
) -> Result<u32> {
    check_symmetry(store, sampler, provider)?;
    if store.contains(&table.table_ref) {
        return Err(Error::Duplicate(table.table_ref.key()));
    }
    let record = embed_table(table, sampler, provider)?;
    store.insert(record)
}
