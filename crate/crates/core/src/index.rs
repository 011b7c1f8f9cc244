//! Append-only vector store with an HNSW graph for approximate search, an
//! exhaustive scan for exact search, and an inverted map from vector id back
//! to the table it came from.
//!
//! On disk a store is three files: `manifest` (key=value text),
//! `vectors.f32le` (little-endian f32, insertion order) and `ids.tsv`
//! (`id<TAB>lake/table`). The manifest carries SHA-256 digests of the other
//! two. The graph is not written out; it is rebuilt on load by replaying
//! insertions with the same seed, which reproduces it exactly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::embed::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::table::TableRef;

pub const MANIFEST: &str = "manifest";
pub const VECTORS: &str = "vectors.f32le";
pub const IDS: &str = "ids.tsv";
const FORMAT: &str = "tus-forge-store";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Cosine,
    Dot,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "dot" => Ok(Metric::Dot),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Dot => "dot",
            Metric::Euclidean => "euclidean",
        })
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Similarity with precomputed norms. Higher is always more similar.
pub(crate) fn score_with_norms(
    metric: Metric,
    a: &[f32],
    a_norm: f64,
    b: &[f32],
    b_norm: f64,
) -> f64 {
    match metric {
        Metric::Dot => dot(a, b),
        Metric::Cosine => {
            if a_norm == 0.0 || b_norm == 0.0 {
                0.0
            } else {
                (dot(a, b) / (a_norm * b_norm)).clamp(-1.0, 1.0)
            }
        }
        Metric::Euclidean => -a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = f64::from(x) - f64::from(y);
                d * d
            })
            .sum::<f64>()
            .sqrt(),
    }
}

pub(crate) fn score(metric: Metric, a: &[f32], b: &[f32]) -> f64 {
    score_with_norms(metric, a, norm(a), b, norm(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswParams {
    pub max_connections: usize,
    pub ef_construction: usize,
    /// Lower bound on the query breadth. Near-isotropic vectors of a few
    /// hundred dimensions need several hundred for recall@10 above 0.95.
    pub ef_search: usize,
    /// Stores at or below this size are searched with a breadth covering
    /// every node.
    pub exhaustive_below: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            max_connections: 16,
            ef_construction: 200,
            ef_search: 512,
            exhaustive_below: 256,
            seed: 0x5eed,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_connections < 2 {
            return Err(Error::Config("max connections must be at least 2".into()));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::Config("search breadths must be positive".into()));
        }
        Ok(())
    }

    /// Breadth used for a top-k query.
    pub fn breadth_for(&self, k: usize) -> usize {
        self.ef_search.max(4 * k)
    }
}

/// Flat view over stored vectors handed to the graph.
struct Points<'a> {
    data: &'a [f32],
    norms: &'a [f64],
    dim: usize,
    metric: Metric,
}

impl Points<'_> {
    fn vector(&self, id: u32) -> &[f32] {
        let i = id as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    fn to_query(&self, q: &[f32], q_norm: f64, id: u32) -> f64 {
        score_with_norms(
            self.metric,
            q,
            q_norm,
            self.vector(id),
            self.norms[id as usize],
        )
    }

    fn between(&self, a: u32, b: u32) -> f64 {
        score_with_norms(
            self.metric,
            self.vector(a),
            self.norms[a as usize],
            self.vector(b),
            self.norms[b as usize],
        )
    }
}

/// Heap entry ordered by score, then by lower id.
#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    id: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct Node {
    /// `links[l]` are the neighbors on layer `l`.
    links: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
struct Hnsw {
    params: HnswParams,
    level_mult: f64,
    nodes: Vec<Node>,
    entry: Option<u32>,
    top_level: usize,
    rng: ChaCha8Rng,
}

impl Hnsw {
    fn new(params: HnswParams) -> Self {
        Hnsw {
            level_mult: 1.0 / (params.max_connections as f64).ln(),
            params,
            nodes: Vec::new(),
            entry: None,
            top_level: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
        }
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.max_connections
        } else {
            self.params.max_connections
        }
    }

    fn random_level(&mut self) -> usize {
        let u: f64 = self.rng.random_range(f64::EPSILON..1.0);
        ((-u.ln() * self.level_mult).floor() as usize).min(32)
    }

    fn greedy(&self, pts: &Points, q: &[f32], qn: f64, mut cur: Scored, layer: usize) -> Scored {
        loop {
            let mut improved = false;
            for &n in &self.nodes[cur.id as usize].links[layer] {
                let s = Scored {
                    score: pts.to_query(q, qn, n),
                    id: n,
                };
                if s > cur {
                    cur = s;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Beam search on one layer. Returns up to `ef` best nodes, best first.
    fn search_layer(
        &self,
        pts: &Points,
        q: &[f32],
        qn: f64,
        entries: &[Scored],
        ef: usize,
        layer: usize,
    ) -> Vec<Scored> {
        let mut visited = vec![false; self.nodes.len()];
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new();
        for &e in entries {
            if !std::mem::replace(&mut visited[e.id as usize], true) {
                candidates.push(e);
                results.push(std::cmp::Reverse(e));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().map(|r| r.0);
            if let Some(w) = worst {
                if results.len() >= ef && c < w {
                    break;
                }
            }
            for &n in &self.nodes[c.id as usize].links[layer] {
                if std::mem::replace(&mut visited[n as usize], true) {
                    continue;
                }
                let s = Scored {
                    score: pts.to_query(q, qn, n),
                    id: n,
                };
                let admit = results.len() < ef || results.peek().is_some_and(|w| s > w.0);
                if admit {
                    candidates.push(s);
                    results.push(std::cmp::Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Neighbor-diversity heuristic: keep a candidate only if it is closer to
    /// the base than to anything already kept, then top up with the rest.
    fn select(&self, pts: &Points, sorted: &[Scored], m: usize) -> Vec<u32> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for &c in sorted {
            if kept.len() >= m {
                break;
            }
            if kept.iter().all(|k| pts.between(c.id, k.id) < c.score) {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|s| s.id).collect()
    }

    fn insert(&mut self, pts: &Points, id: u32) {
        debug_assert_eq!(id as usize, self.nodes.len());
        let level = self.random_level();
        self.nodes.push(Node {
            links: vec![Vec::new(); level + 1],
        });
        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.top_level = level;
            return;
        };
        let q = pts.vector(id);
        let qn = pts.norms[id as usize];
        let mut cur = Scored {
            score: pts.to_query(q, qn, entry),
            id: entry,
        };
        for layer in (level + 1..=self.top_level).rev() {
            cur = self.greedy(pts, q, qn, cur, layer);
        }
        let mut entries = vec![cur];
        for layer in (0..=level.min(self.top_level)).rev() {
            let found = self.search_layer(pts, q, qn, &entries, self.params.ef_construction, layer);
            let m = self.max_links(layer);
            let chosen = self.select(pts, &found, self.params.max_connections.min(m));
            self.nodes[id as usize].links[layer] = chosen.clone();
            for n in chosen {
                let links = &mut self.nodes[n as usize].links[layer];
                links.push(id);
                if links.len() > m {
                    let mut cands: Vec<Scored> = links
                        .iter()
                        .map(|&x| Scored {
                            score: pts.between(n, x),
                            id: x,
                        })
                        .collect();
                    cands.sort_by(|a, b| b.cmp(a));
                    let trimmed = self.select(pts, &cands, m);
                    self.nodes[n as usize].links[layer] = trimmed;
                }
            }
            entries = found;
        }
        if level > self.top_level {
            self.top_level = level;
            self.entry = Some(id);
        }
    }

    fn search(&self, pts: &Points, q: &[f32], ef: usize) -> Vec<Scored> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let qn = norm(q);
        let mut cur = Scored {
            score: pts.to_query(q, qn, entry),
            id: entry,
        };
        for layer in (1..=self.top_level).rev() {
            cur = self.greedy(pts, q, qn, cur, layer);
        }
        self.search_layer(pts, q, qn, &[cur], ef, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub table_ref: TableRef,
    pub score: f64,
}

/// Descending score, ties by ascending composite key.
fn rank(neighbors: &mut [Neighbor]) {
    neighbors.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.table_ref.cmp(&b.table_ref))
    });
}

/// Everything the manifest records besides the data digests.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreMeta {
    pub dimension: usize,
    pub metric: Metric,
    pub model_id: String,
    pub hnsw: HnswParams,
    /// Pipeline settings captured at index time (sampler, provider, ...),
    /// compared against query-time settings.
    pub config: BTreeMap<String, String>,
}

impl StoreMeta {
    pub fn new(dimension: usize, metric: Metric, model_id: impl Into<String>) -> Self {
        StoreMeta {
            dimension,
            metric,
            model_id: model_id.into(),
            hnsw: HnswParams::default(),
            config: BTreeMap::new(),
        }
    }
}

pub struct VectorStore {
    meta: StoreMeta,
    data: Vec<f32>,
    norms: Vec<f64>,
    refs: Vec<TableRef>,
    ids: HashMap<TableRef, u32>,
    lakes: BTreeMap<String, usize>,
    graph: Hnsw,
    exec: Exec,
}

impl fmt::Debug for VectorStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorStore")
            .field("meta", &self.meta)
            .field("len", &self.len())
            .finish()
    }
}

impl VectorStore {
    pub fn new(meta: StoreMeta) -> Result<Self> {
        meta.hnsw.validate()?;
        if meta.dimension == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        Ok(VectorStore {
            graph: Hnsw::new(meta.hnsw),
            meta,
            data: Vec::new(),
            norms: Vec::new(),
            refs: Vec::new(),
            ids: HashMap::new(),
            lakes: BTreeMap::new(),
            exec: Exec::default(),
        })
    }

    /// Execution mode for exhaustive scans and batch queries.
    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn from_records(
        meta: StoreMeta,
        records: impl IntoIterator<Item = EmbeddingRecord>,
    ) -> Result<Self> {
        let mut store = VectorStore::new(meta)?;
        for r in records {
            store.insert(r)?;
        }
        Ok(store)
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn meta_mut_config(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta.config
    }

    pub fn dimension(&self) -> usize {
        self.meta.dimension
    }

    pub fn metric(&self) -> Metric {
        self.meta.metric
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// Inverted index lookup: vector id to table.
    pub fn resolve(&self, id: u32) -> Option<&TableRef> {
        self.refs.get(id as usize)
    }

    pub fn id_of(&self, table_ref: &TableRef) -> Option<u32> {
        self.ids.get(table_ref).copied()
    }

    pub fn contains(&self, table_ref: &TableRef) -> bool {
        self.ids.contains_key(table_ref)
    }

    pub fn vector(&self, id: u32) -> Option<&[f32]> {
        let i = id as usize;
        (i < self.len()).then(|| &self.data[i * self.dimension()..(i + 1) * self.dimension()])
    }

    pub fn lakes(&self) -> impl Iterator<Item = &str> {
        self.lakes.keys().map(String::as_str)
    }

    pub fn records(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        (0..self.len() as u32).map(|id| EmbeddingRecord {
            table_ref: self.refs[id as usize].clone(),
            vector: self.vector(id).unwrap_or_default().to_vec(),
            model_id: self.meta.model_id.clone(),
        })
    }

    fn points(&self) -> Points<'_> {
        Points {
            data: &self.data,
            norms: &self.norms,
            dim: self.meta.dimension,
            metric: self.meta.metric,
        }
    }

    /// Appends a record; it is searchable as soon as this returns.
    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<u32> {
        if record.vector.len() != self.dimension() {
            return Err(Error::Dimension {
                expected: self.dimension(),
                got: record.vector.len(),
            });
        }
        if record.model_id != self.meta.model_id {
            return Err(Error::Config(format!(
                "record from model {:?} cannot join a store of model {:?}",
                record.model_id, self.meta.model_id
            )));
        }
        if self.ids.contains_key(&record.table_ref) {
            return Err(Error::Duplicate(record.table_ref.key()));
        }
        let id = u32::try_from(self.len()).map_err(|_| Error::Config("store is full".into()))?;
        self.norms.push(norm(&record.vector));
        self.data.extend_from_slice(&record.vector);
        *self
            .lakes
            .entry(record.table_ref.lake_id().to_owned())
            .or_default() += 1;
        self.ids.insert(record.table_ref.clone(), id);
        self.refs.push(record.table_ref);
        let pts = Points {
            data: &self.data,
            norms: &self.norms,
            dim: self.meta.dimension,
            metric: self.meta.metric,
        };
        self.graph.insert(&pts, id);
        Ok(id)
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.dimension() {
            return Err(Error::Dimension {
                expected: self.dimension(),
                got: query.len(),
            });
        }
        Ok(())
    }

    fn permitted(&self, lakes: Option<&BTreeSet<String>>, id: u32) -> bool {
        lakes.is_none_or(|set| set.contains(self.refs[id as usize].lake_id()))
    }

    fn finish(&self, hits: impl Iterator<Item = (u32, f64)>, k: usize) -> Vec<Neighbor> {
        let mut out: Vec<Neighbor> = hits
            .map(|(id, score)| Neighbor {
                table_ref: self.refs[id as usize].clone(),
                score,
            })
            .collect();
        rank(&mut out);
        out.truncate(k);
        out
    }

    /// Approximate top-k through the HNSW graph, optionally restricted to
    /// some lakes. Filtering happens after the graph search; the breadth is
    /// multiplied by the number of lakes until `k` survivors are found or
    /// the whole store has been covered.
    pub fn search_ann(
        &self,
        query: &[f32],
        k: usize,
        lakes: Option<&BTreeSet<String>>,
    ) -> Result<Vec<Neighbor>> {
        self.check_query(query, k)?;
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.len();
        let mut ef = if n <= self.meta.hnsw.exhaustive_below {
            n
        } else {
            self.meta.hnsw.breadth_for(k)
        };
        let growth = self.lakes.len().max(2);
        let pts = self.points();
        loop {
            let found = self.graph.search(&pts, query, ef);
            let kept: Vec<(u32, f64)> = found
                .iter()
                .filter(|s| self.permitted(lakes, s.id))
                .map(|s| (s.id, s.score))
                .collect();
            if kept.len() >= k || ef >= n || lakes.is_none() {
                return Ok(self.finish(kept.into_iter(), k));
            }
            ef = ef.saturating_mul(growth).min(n);
        }
    }

    /// Exhaustive top-k; the reference the graph search is measured against.
    pub fn search_exact(
        &self,
        query: &[f32],
        k: usize,
        lakes: Option<&BTreeSet<String>>,
    ) -> Result<Vec<Neighbor>> {
        self.check_query(query, k)?;
        let pts = self.points();
        let qn = norm(query);
        let scores = self
            .exec
            .map_range(self.len(), |i| pts.to_query(query, qn, i as u32));
        Ok(self.finish(
            scores
                .into_iter()
                .enumerate()
                .map(|(i, s)| (i as u32, s))
                .filter(|&(i, _)| self.permitted(lakes, i)),
            k,
        ))
    }

    /// Runs many queries, in parallel when the store's exec mode allows.
    pub fn search_many(
        &self,
        queries: &[Vec<f32>],
        k: usize,
        exact: bool,
        lakes: Option<&BTreeSet<String>>,
    ) -> Result<Vec<Vec<Neighbor>>> {
        let inner = VectorStoreRef {
            store: self,
            exact,
            lakes,
            k,
        };
        self.exec.try_map(queries, |q| inner.run(q))
    }

    /// Writes the store as a manifest, vector file and id map.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        write_store_files(dir, &self.meta, self.refs.iter(), &self.data)
    }

    /// Reads a store written by [`persist`](Self::persist) and rebuilds the
    /// graph by replaying insertions.
    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, records) = read_store_files(dir)?;
        VectorStore::from_records(meta, records)
    }
}

struct VectorStoreRef<'a> {
    store: &'a VectorStore,
    exact: bool,
    lakes: Option<&'a BTreeSet<String>>,
    k: usize,
}

impl VectorStoreRef<'_> {
    fn run(&self, q: &[f32]) -> Result<Vec<Neighbor>> {
        if self.exact {
            self.store.search_exact(q, self.k, self.lakes)
        } else {
            self.store.search_ann(q, self.k, self.lakes)
        }
    }
}

fn escape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the three store files for any sequence of records. Also used for
/// embedding artifacts that have not been indexed yet.
pub fn write_store_files<'a>(
    dir: &Path,
    meta: &StoreMeta,
    refs: impl Iterator<Item = &'a TableRef>,
    data: &[f32],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut vec_bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        vec_bytes.extend_from_slice(&x.to_le_bytes());
    }
    let mut ids = String::new();
    let mut count = 0usize;
    for (i, r) in refs.enumerate() {
        ids.push_str(&format!("{i}\t{r}\n"));
        count += 1;
    }
    if count * meta.dimension != data.len() {
        return Err(Error::Config(
            "vector data does not match record count".into(),
        ));
    }
    let mut manifest = format!(
        "format={FORMAT}\nversion={FORMAT_VERSION}\ndimension={}\nmetric={}\ncount={count}\nmodel_id={}\n",
        meta.dimension,
        meta.metric,
        escape(&meta.model_id)
    );
    let h = &meta.hnsw;
    manifest.push_str(&format!(
        "hnsw.max_connections={}\nhnsw.ef_construction={}\nhnsw.ef_search={}\nhnsw.exhaustive_below={}\nhnsw.seed={}\n",
        h.max_connections, h.ef_construction, h.ef_search, h.exhaustive_below, h.seed
    ));
    for (k, v) in &meta.config {
        manifest.push_str(&format!("config.{}={}\n", escape(k), escape(v)));
    }
    manifest.push_str(&format!(
        "vectors.sha256={}\nids.sha256={}\n",
        sha256_hex(&vec_bytes),
        sha256_hex(ids.as_bytes())
    ));
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(VECTORS, &vec_bytes)?;
    write(IDS, ids.as_bytes())?;
    write(MANIFEST, manifest.as_bytes())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptStore(msg.into())
}

/// Parses the manifest into ordered key/value pairs.
pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::StoreNotFound(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("manifest line {line:?}")))?;
        kv.insert(unescape(k), unescape(v));
    }
    if kv.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(corrupt("bad magic in manifest"));
    }
    Ok(kv)
}

fn field<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| corrupt(format!("manifest lacks {key}")))?
        .parse()
        .map_err(|_| corrupt(format!("manifest field {key} is invalid")))
}

pub fn read_store_files(dir: &Path) -> Result<(StoreMeta, Vec<EmbeddingRecord>)> {
    let kv = read_manifest(dir)?;
    let version: u32 = field(&kv, "version")?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let dimension: usize = field(&kv, "dimension")?;
    let count: usize = field(&kv, "count")?;
    let metric: Metric = kv
        .get("metric")
        .ok_or_else(|| corrupt("manifest lacks metric"))?
        .parse()
        .map_err(|_| corrupt("bad metric"))?;
    let meta = StoreMeta {
        dimension,
        metric,
        model_id: kv.get("model_id").cloned().unwrap_or_default(),
        hnsw: HnswParams {
            max_connections: field(&kv, "hnsw.max_connections")?,
            ef_construction: field(&kv, "hnsw.ef_construction")?,
            ef_search: field(&kv, "hnsw.ef_search")?,
            exhaustive_below: field(&kv, "hnsw.exhaustive_below")?,
            seed: field(&kv, "hnsw.seed")?,
        },
        config: kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_owned(), v.clone())))
            .collect(),
    };
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => corrupt(format!("missing {name}")),
            _ => Error::io(p, e),
        })
    };
    let vec_bytes = read(VECTORS)?;
    let id_bytes = read(IDS)?;
    if sha256_hex(&vec_bytes) != kv.get("vectors.sha256").map(String::as_str).unwrap_or("") {
        return Err(corrupt("vector file checksum mismatch"));
    }
    if sha256_hex(&id_bytes) != kv.get("ids.sha256").map(String::as_str).unwrap_or("") {
        return Err(corrupt("id file checksum mismatch"));
    }
    if vec_bytes.len() != count * dimension * 4 {
        return Err(corrupt("vector file length does not match manifest"));
    }
    let ids = String::from_utf8(id_bytes).map_err(|_| corrupt("id file is not UTF-8"))?;
    let mut records = Vec::with_capacity(count);
    for (i, line) in ids.lines().enumerate() {
        let (id, key) = line
            .split_once('\t')
            .ok_or_else(|| corrupt(format!("id line {line:?}")))?;
        if id.parse::<usize>().ok() != Some(i) {
            return Err(corrupt(format!("id {id} out of sequence")));
        }
        let table_ref = TableRef::parse(key).map_err(|e| corrupt(e.to_string()))?;
        let start = i * dimension * 4;
        let vector = vec_bytes[start..start + dimension * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(EmbeddingRecord {
            table_ref,
            vector,
            model_id: meta.model_id.clone(),
        });
    }
    if records.len() != count {
        return Err(corrupt("id file length does not match manifest"));
    }
    Ok((meta, records))
}

/// Writes bare records (no graph) in the store file layout.
pub fn write_records(dir: &Path, meta: &StoreMeta, records: &[EmbeddingRecord]) -> Result<()> {
    let mut data = Vec::with_capacity(records.len() * meta.dimension);
    for r in records {
        if r.vector.len() != meta.dimension {
            return Err(Error::Dimension {
                expected: meta.dimension,
                got: r.vector.len(),
            });
        }
        data.extend_from_slice(&r.vector);
    }
    write_store_files(dir, meta, records.iter().map(|r| &r.table_ref), &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::normalize;

    fn rec(key: &str, v: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord {
            table_ref: TableRef::parse(key).unwrap(),
            vector: v,
            model_id: "m".into(),
        }
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        normalize(&mut v);
        v
    }

    fn random_store(n: usize, dim: usize, seed: u64) -> VectorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n).map(|i| {
            rec(
                &format!("lake{}/t{i:05}", i % 3),
                random_unit(&mut rng, dim),
            )
        });
        VectorStore::from_records(StoreMeta::new(dim, Metric::Cosine, "m"), records).unwrap()
    }

    #[test]
    fn basis_vectors_exact_match_first() {
        let mut s = VectorStore::new(StoreMeta::new(2, Metric::Cosine, "m")).unwrap();
        assert_eq!(s.insert(rec("l/e0", vec![1.0, 0.0])).unwrap(), 0);
        s.insert(rec("l/e1", vec![0.0, 1.0])).unwrap();
        let hits = s.search_ann(&[1.0, 0.0], 1, None).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].table_ref.key(), "l/e0");
        assert_eq!(hits[0].score, 1.0);
        let all = s.search_ann(&[1.0, 0.0], 10, None).unwrap();
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn exact_search_hand_computed() {
        let mut s = VectorStore::new(StoreMeta::new(2, Metric::Cosine, "m")).unwrap();
        s.insert(rec("l/x", vec![1.0, 0.0])).unwrap();
        s.insert(rec("l/y", vec![0.0, 1.0])).unwrap();
        let hits = s.search_exact(&[0.6, 0.8], 2, None).unwrap();
        assert_eq!(hits[0].table_ref.key(), "l/y");
        assert!((hits[0].score - 0.8).abs() < 1e-7);
        assert!((hits[1].score - 0.6).abs() < 1e-7);
    }

    #[test]
    fn insert_errors() {
        let mut s = VectorStore::new(StoreMeta::new(2, Metric::Cosine, "m")).unwrap();
        s.insert(rec("l/x", vec![1.0, 0.0])).unwrap();
        assert!(matches!(
            s.insert(rec("l/x", vec![0.0, 1.0])),
            Err(Error::Duplicate(_))
        ));
        assert!(matches!(
            s.insert(rec("l/z", vec![0.0, 1.0, 0.0])),
            Err(Error::Dimension {
                expected: 2,
                got: 3
            })
        ));
        let mut other = rec("l/w", vec![0.0, 1.0]);
        other.model_id = "other".into();
        assert!(s.insert(other).is_err());
        assert!(matches!(
            s.search_ann(&[1.0], 1, None),
            Err(Error::Dimension { .. })
        ));
        assert!(s.search_ann(&[1.0, 0.0], 0, None).is_err());
    }

    #[test]
    fn empty_store_returns_nothing() {
        let s = VectorStore::new(StoreMeta::new(4, Metric::Cosine, "m")).unwrap();
        assert!(s
            .search_ann(&[1.0, 0.0, 0.0, 0.0], 3, None)
            .unwrap()
            .is_empty());
        assert!(s
            .search_exact(&[1.0, 0.0, 0.0, 0.0], 3, None)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ties_break_by_composite_key() {
        let mut s = VectorStore::new(StoreMeta::new(2, Metric::Cosine, "m")).unwrap();
        for key in ["b/t", "a/t", "a/s"] {
            s.insert(rec(key, vec![1.0, 0.0])).unwrap();
        }
        let keys: Vec<_> = s
            .search_ann(&[1.0, 0.0], 3, None)
            .unwrap()
            .into_iter()
            .map(|n| n.table_ref.key())
            .collect();
        assert_eq!(keys, ["a/s", "a/t", "b/t"]);
    }

    #[test]
    fn inverted_index_resolves_every_insert() {
        let s = random_store(10_000, 16, 3);
        for id in 0..s.len() as u32 {
            let r = s.resolve(id).unwrap();
            assert_eq!(s.id_of(r), Some(id));
        }
        let q = s.vector(17).unwrap().to_vec();
        let hits = s.search_ann(&q, 5, None).unwrap();
        assert_eq!(hits[0].table_ref, *s.resolve(17).unwrap());
    }

    #[test]
    fn small_stores_match_exact_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 5, 64, 200, 256] {
            let s = random_store(n, 32, n as u64);
            for _ in 0..20 {
                let q = random_unit(&mut rng, 32);
                for k in [1, 10, 300] {
                    assert_eq!(
                        s.search_ann(&q, k, None).unwrap(),
                        s.search_exact(&q, k, None).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn lake_filter_is_sound() {
        let s = random_store(2000, 16, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let only: BTreeSet<String> = ["lake1".to_string()].into();
        for _ in 0..20 {
            let q = random_unit(&mut rng, 16);
            let hits = s.search_ann(&q, 25, Some(&only)).unwrap();
            assert_eq!(hits.len(), 25);
            assert!(hits.iter().all(|h| h.table_ref.lake_id() == "lake1"));
            let exact = s.search_exact(&q, 25, Some(&only)).unwrap();
            assert!(exact.iter().all(|h| h.table_ref.lake_id() == "lake1"));
        }
        let none: BTreeSet<String> = ["nope".to_string()].into();
        assert!(s
            .search_ann(&random_unit(&mut rng, 16), 5, Some(&none))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn cosine_scores_are_bounded() {
        let s = random_store(300, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q: Vec<f32> = (0..8).map(|_| rng.random_range(-5.0f32..5.0)).collect();
            for h in s.search_exact(&q, 300, None).unwrap() {
                assert!(h.score >= -1.0 - 1e-9 && h.score <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn metric_scores() {
        let a = [3.0f32, 4.0];
        assert_eq!(score(Metric::Euclidean, &[0.0, 0.0], &a), -5.0);
        assert_eq!(score(Metric::Dot, &a, &a), 25.0);
        assert_eq!(score(Metric::Cosine, &[0.0, 0.0], &a), 0.0);
        assert_eq!(score(Metric::Cosine, &[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn persist_round_trip_and_corruption() {
        let mut s = random_store(1000, 16, 5);
        s.meta_mut_config()
            .insert("sampler.newline".into(), "\n".into());
        let dir = tempfile::tempdir().unwrap();
        s.persist(dir.path()).unwrap();
        let loaded = VectorStore::load(dir.path()).unwrap();
        assert_eq!(loaded.meta(), s.meta());
        assert_eq!(loaded.data, s.data);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let q = random_unit(&mut rng, 16);
            assert_eq!(
                s.search_ann(&q, 10, None).unwrap(),
                loaded.search_ann(&q, 10, None).unwrap()
            );
        }

        let vec_path = dir.path().join(VECTORS);
        let bytes = fs::read(&vec_path).unwrap();
        fs::write(&vec_path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            VectorStore::load(dir.path()),
            Err(Error::CorruptStore(_))
        ));
        fs::write(&vec_path, &bytes).unwrap();

        let man = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&man).unwrap();
        fs::write(&man, text.replace(FORMAT, "something-else")).unwrap();
        assert!(matches!(
            VectorStore::load(dir.path()),
            Err(Error::CorruptStore(_))
        ));

        let missing = dir.path().join("nope");
        assert!(matches!(
            VectorStore::load(&missing),
            Err(Error::StoreNotFound(_))
        ));
    }

    #[test]
    fn manifest_escaping_round_trips() {
        for s in ["plain", "a\nb", "tab\there", "back\\slash\\n"] {
            assert_eq!(unescape(&escape(s)), s);
        }
    }
}
