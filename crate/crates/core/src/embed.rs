//! Embedding providers and the batch embedding contract.
//!
//! Every vector leaving this module is L2-normalized here, whatever the
//! provider claims, so cosine similarity reduces to a dot product downstream.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hash::fnv64;
use crate::serialize::{
    greedy_batch, serialize_tables, BatchPlan, EstimatingTokenizer, MockTokenizer, SamplerConfig,
    Serialization, Tokenizer,
};
use crate::table::{Table, TableRef};

pub const MIN_DIMENSION: usize = 8;
/// Fraction of N kept when token counts are only estimated.
pub const ESTIMATE_SAFETY: f64 = 0.9;
pub const DEFAULT_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub table_ref: TableRef,
    pub vector: Vec<f32>,
    pub model_id: String,
}

/// Per-serialization (`n`) and per-batch (`m`) token budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLimits {
    pub n: usize,
    pub m: usize,
}

impl TokenLimits {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("token limit N must be at least 1".into()));
        }
        if n > m {
            return Err(Error::Config(format!("N={n} exceeds M={m}")));
        }
        Ok(TokenLimits { n, m })
    }

    /// For providers without batch support.
    pub fn unbatched(n: usize) -> Result<Self> {
        TokenLimits::new(n, n)
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;

    fn dimension(&self) -> usize;

    fn tokenizer(&self) -> &dyn Tokenizer;

    /// Limits to batch against, after any safety margin.
    fn limits(&self) -> TokenLimits;

    /// Raw vectors, one per input text, in input order.
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;

    /// Extra settings that change the vectors produced, recorded with a
    /// store so queries can be checked against them.
    fn settings(&self) -> Vec<(String, String)> {
        Vec::new()
    }
}

pub fn count_tokens(text: &str, provider: &dyn EmbeddingProvider) -> usize {
    provider.tokenizer().count(text)
}

/// Normalizes in place (accumulating in f64); a zero vector becomes `e_0`.
pub fn normalize(v: &mut [f32]) {
    let norm = v
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        if !v.is_empty() {
            v.iter_mut().for_each(|x| *x = 0.0);
            v[0] = 1.0;
        }
        return;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
}

/// Signed feature hashing of lowercase character 3-grams into `dim` buckets.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    assert!(
        dim >= MIN_DIMENSION,
        "dimension {dim} below {MIN_DIMENSION}"
    );
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut acc = vec![0f64; dim];
    let mut buf = [0u8; 12];
    for gram in chars.windows(3) {
        let mut len = 0;
        for c in gram {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        let h = fnv64(seed, &buf[..len]);
        let bucket = (h % dim as u64) as usize;
        acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e0 = vec![0f32; dim];
        e0[0] = 1.0;
        return e0;
    }
    acc.iter().map(|x| (x / norm) as f32).collect()
}

/// Deterministic offline provider backed by [`mock_embed`].
#[derive(Debug)]
pub struct MockProvider {
    model: String,
    dim: usize,
    seed: u64,
    limits: TokenLimits,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(
        model: impl Into<String>,
        dim: usize,
        seed: u64,
        limits: TokenLimits,
    ) -> Result<Self> {
        if dim < MIN_DIMENSION {
            return Err(Error::Config(format!(
                "dimension {dim} below {MIN_DIMENSION}"
            )));
        }
        Ok(MockProvider {
            model: model.into(),
            dim,
            seed,
            limits,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of `embed_texts` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl EmbeddingProvider for MockProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &MockTokenizer
    }

    fn limits(&self) -> TokenLimits {
        self.limits
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|t| mock_embed(t, self.dim, self.seed))
            .collect())
    }

    fn settings(&self) -> Vec<(String, String)> {
        vec![("seed".into(), self.seed.to_string())]
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

/// HTTP provider speaking the common embeddings-API JSON shape:
/// `{"model", "input": [..]}` in, `{"data": [{"index", "embedding"}]}` out.
pub struct RemoteProvider {
    endpoint: String,
    model: String,
    dim: usize,
    credential: Option<String>,
    limits: TokenLimits,
    attempts: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

impl RemoteProvider {
    /// `limits` are the model's nominal limits; N is scaled down by
    /// [`ESTIMATE_SAFETY`] because token counts are estimated locally.
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        dim: usize,
        limits: TokenLimits,
        credential: Option<String>,
    ) -> Result<Self> {
        if dim < MIN_DIMENSION {
            return Err(Error::Config(format!(
                "dimension {dim} below {MIN_DIMENSION}"
            )));
        }
        let n = ((limits.n as f64 * ESTIMATE_SAFETY).floor() as usize).max(1);
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Ok(RemoteProvider {
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            credential,
            limits: TokenLimits { n, m: limits.m },
            attempts: 3,
            backoff: Duration::from_millis(500),
            agent,
        })
    }

    /// Base delay between attempts; doubles after each failure.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn request(&self, texts: &[&str]) -> std::result::Result<EmbedResponse, String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.credential {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_vec(&EmbedRequest {
            model: &self.model,
            input: texts,
        })
        .map_err(|e| e.to_string())?;
        let resp = req
            .header("Content-Type", "application/json")
            .send(&body[..])
            .map_err(|e| e.to_string())?;
        resp.into_body()
            .read_json::<EmbedResponse>()
            .map_err(|e| format!("bad response body: {e}"))
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &EstimatingTokenizer
    }

    fn limits(&self) -> TokenLimits {
        self.limits
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts {
            match self.request(texts) {
                Ok(mut resp) => {
                    if resp.data.iter().all(|d| d.index.is_some()) {
                        resp.data.sort_by_key(|d| d.index);
                    }
                    return Ok(resp.data.into_iter().map(|d| d.embedding).collect());
                }
                Err(e) => last = e,
            }
            if attempt < self.attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(Error::Provider(format!(
            "{} failed after {} attempts: {last}",
            self.endpoint, self.attempts
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Mock,
    Remote,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(ProviderKind::Mock),
            "remote" => Ok(ProviderKind::Remote),
            other => Err(Error::Config(format!("unknown provider kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProviderKind::Mock => "mock",
            ProviderKind::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub model: String,
    pub dim: usize,
    pub limit_n: usize,
    pub limit_m: usize,
    /// Mock hashing seed.
    pub seed: u64,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub credential_env: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            model: "mock-trigram".into(),
            dim: 256,
            limit_n: 8192,
            limit_m: 8192,
            seed: 0,
            endpoint: None,
            credential_env: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < MIN_DIMENSION {
            return Err(Error::Config(format!(
                "dimension {} below {MIN_DIMENSION}",
                self.dim
            )));
        }
        TokenLimits::new(self.limit_n, self.limit_m)?;
        if self.kind == ProviderKind::Remote && self.endpoint.is_none() {
            return Err(Error::Config("remote provider needs an endpoint".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>> {
        self.validate()?;
        let limits = TokenLimits::new(self.limit_n, self.limit_m)?;
        Ok(match self.kind {
            ProviderKind::Mock => {
                Box::new(MockProvider::new(&self.model, self.dim, self.seed, limits)?)
            }
            ProviderKind::Remote => {
                let credential = match &self.credential_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        Error::Config(format!("credential variable {var} is not set"))
                    })?),
                    None => None,
                };
                Box::new(RemoteProvider::new(
                    self.endpoint.clone().unwrap_or_default(),
                    &self.model,
                    self.dim,
                    limits,
                    credential,
                )?)
            }
        })
    }
}

/// Embeds one batch; output is order-aligned and unit-norm.
pub fn embed_batch(
    batch: &[Serialization],
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<EmbeddingRecord>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<&str> = batch.iter().map(|s| s.text.as_str()).collect();
    let vectors = provider.embed_texts(&texts)?;
    if vectors.len() != batch.len() {
        return Err(Error::Provider(format!(
            "sent {} inputs, received {} vectors",
            batch.len(),
            vectors.len()
        )));
    }
    let dim = provider.dimension();
    batch
        .iter()
        .zip(vectors)
        .map(|(s, mut v)| {
            if v.len() != dim {
                return Err(Error::Provider(format!(
                    "{}: expected dimension {dim}, received {}",
                    s.table_ref,
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Provider(format!(
                    "{}: non-finite vector",
                    s.table_ref
                )));
            }
            normalize(&mut v);
            Ok(EmbeddingRecord {
                table_ref: s.table_ref.clone(),
                vector: v,
                model_id: provider.model_id().to_owned(),
            })
        })
        .collect()
}

/// Embeds every batch of a plan with at most `in_flight` concurrent calls.
pub fn embed_plan(
    plan: &BatchPlan,
    provider: &dyn EmbeddingProvider,
    in_flight: usize,
    exec: Exec,
) -> Result<Vec<EmbeddingRecord>> {
    let per_batch = exec.map_bounded(&plan.batches, in_flight, |b| embed_batch(b, provider));
    let mut out = Vec::with_capacity(plan.batches.iter().map(Vec::len).sum());
    for batch in per_batch {
        out.extend(batch?);
    }
    Ok(out)
}

/// Serialize, batch and embed a set of tables under the provider's limits.
pub fn embed_tables(
    tables: &[Table],
    sampler: &SamplerConfig,
    provider: &dyn EmbeddingProvider,
    exec: Exec,
) -> Result<Vec<EmbeddingRecord>> {
    sampler.validate()?;
    let limits = provider.limits();
    let sers = serialize_tables(tables, sampler, limits.n, provider.tokenizer(), exec);
    let plan = greedy_batch(sers, limits.n, limits.m)?;
    embed_plan(&plan, provider, DEFAULT_IN_FLIGHT, exec)
}

/// Embeds a single table on its own (one provider call).
pub fn embed_table(
    table: &Table,
    sampler: &SamplerConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<EmbeddingRecord> {
    sampler.validate()?;
    let limits = provider.limits();
    let s = crate::serialize::serialize_table(table, sampler, limits.n, provider.tokenizer());
    embed_batch(std::slice::from_ref(&s), provider)?
        .pop()
        .ok_or_else(|| Error::Provider("empty response".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::serialize::Serialization;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    fn norm(v: &[f32]) -> f64 {
        v.iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum()
    }

    fn ser(key: &str, text: &str) -> Serialization {
        Serialization::from_rows(
            TableRef::parse(key).unwrap(),
            &[vec![text.to_owned()]],
            &SamplerConfig::default(),
            &MockTokenizer,
        )
    }

    fn mock() -> MockProvider {
        MockProvider::new("mock", 64, 1, TokenLimits::new(100, 300).unwrap()).unwrap()
    }

    #[test]
    fn mock_embed_is_pure_and_unit_norm() {
        let a = mock_embed("Hello, World", 128, 5);
        assert_eq!(a, mock_embed("Hello, World", 128, 5));
        assert_eq!(a, mock_embed("hello, world", 128, 5));
        assert!((norm(&a) - 1.0).abs() < 1e-6);
        assert_ne!(a, mock_embed("Hello, World", 128, 6));
        let same = mock_embed("aaaa", 64, 0);
        assert!((dot(&same, &same) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mock_embed_short_text_maps_to_e0() {
        let v = mock_embed("ab", 16, 0);
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_zero_vector_gives_e0() {
        let mut v = vec![0.0f32; 8];
        normalize(&mut v);
        assert_eq!(v[0], 1.0);
        let mut w = vec![3.0f32, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        normalize(&mut w);
        assert_eq!(&w[..2], &[0.6, 0.8]);
    }

    #[test]
    fn count_tokens_per_provider() {
        let m = mock();
        assert_eq!(count_tokens("", &m), 0);
        assert_eq!(count_tokens("a,b", &m), 3);
        let r = RemoteProvider::new(
            "http://127.0.0.1:1/",
            "m",
            16,
            TokenLimits::new(1000, 1000).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(count_tokens(&"x".repeat(400), &r), 100);
        assert_eq!(r.limits().n, 900);
    }

    #[test]
    fn embed_batch_is_aligned_and_deterministic() {
        let p = mock();
        let batch = vec![
            ser("l/a", "alpha beta"),
            ser("l/b", "gamma"),
            ser("l/c", "delta x"),
        ];
        let out = embed_batch(&batch, &p).unwrap();
        assert_eq!(out.len(), 3);
        for (r, s) in out.iter().zip(&batch) {
            assert_eq!(r.table_ref, s.table_ref);
            assert_eq!(r.vector.len(), 64);
            assert!((norm(&r.vector) - 1.0).abs() < 1e-6);
        }
        assert_eq!(out, embed_batch(&batch, &p).unwrap());
        assert_eq!(p.calls(), 2);
    }

    struct WrongDim;
    impl EmbeddingProvider for WrongDim {
        fn model_id(&self) -> &str {
            "wrong"
        }
        fn dimension(&self) -> usize {
            16
        }
        fn tokenizer(&self) -> &dyn Tokenizer {
            &MockTokenizer
        }
        fn limits(&self) -> TokenLimits {
            TokenLimits::new(10, 10).unwrap()
        }
        fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
            Ok(texts.iter().map(|_| vec![1.0; 15]).collect())
        }
    }

    #[test]
    fn wrong_dimension_is_provider_error() {
        let err = embed_batch(&[ser("l/a", "x")], &WrongDim).unwrap_err();
        assert!(matches!(err, Error::Provider(_)));
    }

    #[test]
    fn provider_config_validation() {
        assert!(ProviderConfig::default().validate().is_ok());
        let bad = ProviderConfig {
            dim: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ProviderConfig {
            limit_n: 10,
            limit_m: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ProviderConfig {
            kind: ProviderKind::Remote,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    /// Minimal HTTP server: answers each connection with the next scripted
    /// (status, body) and records request bodies.
    fn serve(script: Vec<(u16, String)>) -> (String, Arc<std::sync::Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/embeddings", listener.local_addr().unwrap());
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in script {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end().to_ascii_lowercase();
                    if l.is_empty() {
                        break;
                    }
                    if let Some(v) = l.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if l.starts_with("authorization:") {
                        auth = line.trim_end().to_owned();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen2
                    .lock()
                    .unwrap()
                    .push(format!("{auth}|{}", String::from_utf8_lossy(&buf)));
                let reason = if status == 200 { "OK" } else { "Error" };
                let resp = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (url, seen)
    }

    fn remote(url: &str, dim: usize) -> RemoteProvider {
        RemoteProvider::new(
            url,
            "m",
            dim,
            TokenLimits::new(100, 100).unwrap(),
            Some("k3y".into()),
        )
        .unwrap()
        .with_backoff(Duration::from_millis(5))
    }

    #[test]
    fn remote_provider_sorts_by_index_and_normalizes() {
        let body = r#"{"data":[{"index":1,"embedding":[0,2,0,0,0,0,0,0]},{"index":0,"embedding":[3,4,0,0,0,0,0,0]}]}"#;
        let (url, seen) = serve(vec![(200, body.into())]);
        let p = remote(&url, 8);
        let out = embed_batch(&[ser("l/a", "one"), ser("l/b", "two")], &p).unwrap();
        assert_eq!(&out[0].vector[..2], &[0.6, 0.8]);
        assert_eq!(&out[1].vector[..2], &[0.0, 1.0]);
        let req = &seen.lock().unwrap()[0];
        assert!(req.contains("Bearer k3y"));
        assert!(req.contains(r#""input":["one","two"]"#));
        assert!(req.contains(r#""model":"m""#));
    }

    #[test]
    fn remote_provider_retries_transient_failures() {
        let ok = r#"{"data":[{"embedding":[1,0,0,0,0,0,0,0]}]}"#;
        let (url, seen) = serve(vec![
            (503, "{}".into()),
            (500, "{}".into()),
            (200, ok.into()),
        ]);
        let out = embed_batch(&[ser("l/a", "one")], &remote(&url, 8)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn remote_provider_gives_up_after_three_attempts() {
        let (url, seen) = serve(vec![
            (500, "{}".into()),
            (500, "{}".into()),
            (500, "{}".into()),
        ]);
        let err = embed_batch(&[ser("l/a", "one")], &remote(&url, 8)).unwrap_err();
        assert!(matches!(err, Error::Provider(_)));
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn remote_wrong_dimension_is_provider_error() {
        let body = r#"{"data":[{"embedding":[1,0,0]}]}"#;
        let (url, _) = serve(vec![(200, body.into())]);
        let err = embed_batch(&[ser("l/a", "one")], &remote(&url, 8)).unwrap_err();
        assert!(matches!(err, Error::Provider(_)));
    }

    #[test]
    fn embed_plan_preserves_order_under_parallelism() {
        let p = mock();
        let sers: Vec<_> = (0..50)
            .map(|i| ser(&format!("l/t{i:02}"), &format!("row number {i} words")))
            .collect();
        let plan = greedy_batch(sers, 10, 30).unwrap();
        assert!(plan.len() > 5);
        let par = embed_plan(&plan, &p, 4, Exec::Parallel).unwrap();
        let seq = embed_plan(&plan, &p, 1, Exec::Sequential).unwrap();
        assert_eq!(par, seq);
        for (i, r) in par.iter().enumerate() {
            assert_eq!(r.table_ref.table_id(), format!("t{i:02}"));
        }
    }
}
