//! Zero-shot table serialization and greedy token-budget batching.
//!
//! A table becomes text by sampling up to `rows` rows, joining cells with a
//! separator and rows with a newline. Column names never enter the text.
//! Each serialization is capped at `N` tokens, then serializations are packed
//! in order into batches whose token sum stays within `M`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hash::Fnv64;
use crate::table::{Table, TableRef};

/// Counts and cuts text in units of tokens.
///
/// `count("")` must be 0 and `count(a + b) >= max(count(a), count(b))`.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    fn count(&self, text: &str) -> usize;

    /// Longest prefix of `text` holding at most `max_tokens` whole tokens.
    fn truncate<'a>(&self, text: &'a str, max_tokens: usize) -> &'a str;
}

/// Whitespace splits tokens; every other non-alphanumeric character is a
/// token of its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockTokenizer;

impl MockTokenizer {
    /// Byte offset just past each token.
    fn token_ends(text: &str) -> impl Iterator<Item = usize> + '_ {
        let mut chars = text.char_indices().peekable();
        std::iter::from_fn(move || loop {
            let (i, c) = chars.next()?;
            if c.is_whitespace() {
                continue;
            }
            if !c.is_alphanumeric() {
                return Some(i + c.len_utf8());
            }
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = chars.peek() {
                if !d.is_alphanumeric() {
                    break;
                }
                end = j + d.len_utf8();
                chars.next();
            }
            return Some(end);
        })
    }
}

impl Tokenizer for MockTokenizer {
    fn name(&self) -> &str {
        "mock"
    }

    fn count(&self, text: &str) -> usize {
        Self::token_ends(text).count()
    }

    fn truncate<'a>(&self, text: &'a str, max_tokens: usize) -> &'a str {
        if max_tokens == 0 {
            return "";
        }
        match Self::token_ends(text).nth(max_tokens - 1) {
            Some(end) => &text[..end],
            None => text,
        }
    }
}

/// Byte-length estimate (`ceil(bytes / 4)`) for remote models whose
/// tokenizer is not available locally.
#[derive(Debug, Clone, Copy, Default)]
pub struct EstimatingTokenizer;

pub const BYTES_PER_TOKEN: usize = 4;

impl Tokenizer for EstimatingTokenizer {
    fn name(&self) -> &str {
        "estimate-bytes/4"
    }

    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(BYTES_PER_TOKEN)
    }

    fn truncate<'a>(&self, text: &'a str, max_tokens: usize) -> &'a str {
        let mut end = (max_tokens * BYTES_PER_TOKEN).min(text.len());
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        &text[..end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Rows sampled per table.
    pub rows: usize,
    pub seed: u64,
    pub sep: String,
    pub newline: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            rows: 32,
            seed: 0,
            sep: ",".into(),
            newline: "\n".into(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 {
            return Err(Error::Config("row count must be at least 1".into()));
        }
        if self.sep == self.newline {
            return Err(Error::Config("separator and newline must differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    Sample = 0,
    Shuffle = 1,
}

/// Seed derived from the global seed and the table's cell values only, so
/// renaming a table or its columns never changes what gets sampled.
pub fn content_seed(table: &Table, seed: u64) -> u64 {
    let mut h = Fnv64::with_seed(seed);
    h.write(&(table.n_cols() as u64).to_le_bytes());
    for row in &table.rows {
        for cell in row {
            h.write(cell.as_bytes());
            h.write(&[0x1f]);
        }
        h.write(&[0x1e]);
    }
    h.finish()
}

fn table_rng(table: &Table, seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed(table, seed));
    rng.set_stream(stream as u64);
    rng
}

/// Generator used to shuffle a lone oversized row during [`finalize`].
pub fn shuffle_rng(table: &Table, cfg: &SamplerConfig) -> ChaCha8Rng {
    table_rng(table, cfg.seed, Stream::Shuffle)
}

/// Picks up to `cfg.rows` rows. Small tables come back whole and in order;
/// larger ones are sampled without replacement, in draw order.
pub fn sample_rows<'t>(table: &'t Table, cfg: &SamplerConfig) -> Vec<&'t [String]> {
    let n = table.n_rows();
    if n <= cfg.rows {
        return table.rows.iter().map(Vec::as_slice).collect();
    }
    let mut rng = table_rng(table, cfg.seed, Stream::Sample);
    rand::seq::index::sample(&mut rng, n, cfg.rows)
        .into_iter()
        .map(|i| table.rows[i].as_slice())
        .collect()
}

pub fn serialize_rows<R: AsRef<[String]>>(rows: &[R], cfg: &SamplerConfig) -> String {
    rows.iter()
        .map(|r| r.as_ref().join(&cfg.sep))
        .collect::<Vec<_>>()
        .join(&cfg.newline)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Serialization {
    pub table_ref: TableRef,
    pub text: String,
    pub token_count: usize,
    pub truncated: bool,
    pub n_rows: usize,
    /// Cells of the only row, kept so an oversized single row can be
    /// shuffled before cutting.
    single_row: Option<Vec<String>>,
}

impl Serialization {
    pub fn from_rows<R: AsRef<[String]>>(
        table_ref: TableRef,
        rows: &[R],
        cfg: &SamplerConfig,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let text = serialize_rows(rows, cfg);
        Serialization {
            table_ref,
            token_count: tokenizer.count(&text),
            text,
            truncated: false,
            n_rows: rows.len(),
            single_row: match rows {
                [only] => Some(only.as_ref().to_vec()),
                _ => None,
            },
        }
    }
}

fn cut_to_limit(text: &str, limit: usize, tokenizer: &dyn Tokenizer) -> String {
    let mut budget = limit;
    loop {
        let cut = tokenizer.truncate(text, budget);
        if tokenizer.count(cut) <= limit || budget == 0 {
            return cut.to_owned();
        }
        budget -= 1;
    }
}

/// Enforces the per-serialization limit `limit` (N).
///
/// Multi-row text loses tokens from the end. A single row has its cells
/// shuffled first so the cut does not always drop the same trailing columns.
pub fn finalize(
    mut s: Serialization,
    limit: usize,
    tokenizer: &dyn Tokenizer,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Serialization {
    if s.token_count <= limit {
        return s;
    }
    if let Some(row) = s.single_row.as_mut() {
        row.shuffle(rng);
        s.text = row.join(&cfg.sep);
    }
    s.text = cut_to_limit(&s.text, limit, tokenizer);
    s.token_count = tokenizer.count(&s.text);
    s.truncated = true;
    s
}

/// Sample, serialize and finalize one table.
pub fn serialize_table(
    table: &Table,
    cfg: &SamplerConfig,
    limit: usize,
    tokenizer: &dyn Tokenizer,
) -> Serialization {
    let rows = sample_rows(table, cfg);
    let s = Serialization::from_rows(table.table_ref.clone(), &rows, cfg, tokenizer);
    finalize(s, limit, tokenizer, cfg, &mut shuffle_rng(table, cfg))
}

pub fn serialize_tables(
    tables: &[Table],
    cfg: &SamplerConfig,
    limit: usize,
    tokenizer: &dyn Tokenizer,
    exec: Exec,
) -> Vec<Serialization> {
    exec.map(tables, |t| serialize_table(t, cfg, limit, tokenizer))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<Serialization>>,
    pub limit_n: usize,
    pub limit_m: usize,
}

impl BatchPlan {
    pub fn batch_tokens(&self) -> Vec<usize> {
        self.batches
            .iter()
            .map(|b| b.iter().map(|s| s.token_count).sum())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn serializations(&self) -> impl Iterator<Item = &Serialization> {
        self.batches.iter().flatten()
    }

    /// One `key\ttokens\tbatch` line per serialization.
    pub fn manifest(&self) -> String {
        let mut out = String::from("table\ttokens\tbatch\n");
        for (b, batch) in self.batches.iter().enumerate() {
            for s in batch {
                out.push_str(&format!("{}\t{}\t{b}\n", s.table_ref, s.token_count));
            }
        }
        out
    }
}

/// Packs serializations in order, closing a batch whenever the next one
/// would push its token sum above `limit_m`.
pub fn greedy_batch(
    serializations: Vec<Serialization>,
    limit_n: usize,
    limit_m: usize,
) -> Result<BatchPlan> {
    if limit_n > limit_m {
        return Err(Error::Config(format!(
            "serialization limit N={limit_n} exceeds batch limit M={limit_m}"
        )));
    }
    if let Some(s) = serializations.iter().find(|s| s.token_count > limit_n) {
        return Err(Error::Config(format!(
            "{} has {} tokens, above N={limit_n}; finalize it first",
            s.table_ref, s.token_count
        )));
    }
    let mut batches = Vec::new();
    let mut batch = Vec::new();
    let mut tokens = 0usize;
    for s in serializations {
        if tokens + s.token_count > limit_m {
            batches.push(std::mem::take(&mut batch));
            tokens = 0;
        }
        tokens += s.token_count;
        batch.push(s);
    }
    if !batch.is_empty() {
        batches.push(batch);
    }
    Ok(BatchPlan {
        batches,
        limit_n,
        limit_m,
    })
}
