//! Seeded synthetic data lakes with known unionability.
//!
//! Every source table is shuffled and cut horizontally into partitions.
//! Partition 0 becomes a query, the rest go to the lake, and noise tables
//! built from unused vocabulary blocks are added on top.
//!
//! Cell words come from integer ranges rendered as pronounceable strings.
//! Distinct integers give distinct words, so disjoint ranges guarantee
//! disjoint vocabularies. Column 0 of every table is a numeric row key;
//! it keeps header detection unambiguous when the lake is read back.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{write_corpus, CorpusLayout, GroundTruth};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hash::fnv64;
use crate::table::{DataLake, Table, TableRef};

const CONSONANTS: &[u8; 16] = b"bdfghklmnprstvwz";
const VOWELS: &[u8; 5] = b"aeiou";
const SYLLABLES: u64 = 80;
const WORD_SYLLABLES: u32 = 4;
/// Number of distinct words: `80^4`.
pub const WORD_SPACE: u64 = SYLLABLES * SYLLABLES * SYLLABLES * SYLLABLES;
/// Multiplier of the scrambling permutation; coprime with `WORD_SPACE`.
const SCRAMBLE: u64 = 7_919_993;
const KEY_STRIDE: u64 = 1_000_000;

pub const QUERY_LAKE: &str = "query";
pub const DEFAULT_LAKE: &str = "synth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mapping {
    #[default]
    OneToOne,
    Onto,
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mapping::OneToOne => "one-to-one",
            Mapping::Onto => "onto",
        })
    }
}

impl FromStr for Mapping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-to-one" => Ok(Mapping::OneToOne),
            "onto" => Ok(Mapping::Onto),
            other => Err(Error::Config(format!("unknown mapping {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub mapping: Mapping,
    pub n_domains: usize,
    pub tables_per_domain: usize,
    pub partitions: usize,
    pub rows: usize,
    /// Includes the key column.
    pub cols: usize,
    /// `None` means 20% of the target tables, rounded.
    pub n_noise: Option<usize>,
    pub vocab_overlap: f64,
    pub onto_drop_cols: usize,
    /// Size of each column's word pool.
    pub words_per_column: usize,
    pub seed: u64,
    pub lake_id: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mapping: Mapping::OneToOne,
            n_domains: 5,
            tables_per_domain: 1,
            partitions: 3,
            rows: 60,
            cols: 6,
            n_noise: None,
            vocab_overlap: 0.0,
            onto_drop_cols: 2,
            words_per_column: 30,
            seed: 0,
            lake_id: DEFAULT_LAKE.into(),
        }
    }
}

impl SynthConfig {
    pub fn n_sources(&self) -> usize {
        self.n_domains * self.tables_per_domain
    }

    pub fn n_targets(&self) -> usize {
        self.n_sources() * (self.partitions - 1)
    }

    pub fn noise_count(&self) -> usize {
        self.n_noise
            .unwrap_or_else(|| (0.2 * self.n_targets() as f64).round() as usize)
    }

    fn shared_words(&self) -> usize {
        (self.vocab_overlap * self.words_per_column as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_domains == 0 || self.tables_per_domain == 0 {
            return fail("need at least one domain and one table per domain".into());
        }
        if self.partitions < 2 {
            return fail(format!(
                "partitions must be at least 2, got {}",
                self.partitions
            ));
        }
        if self.rows < self.partitions {
            return fail(format!(
                "{} rows cannot fill {} partitions",
                self.rows, self.partitions
            ));
        }
        if self.cols < 2 {
            return fail(format!(
                "cols must be at least 2 (key plus one value column), got {}",
                self.cols
            ));
        }
        if !(0.0..=1.0).contains(&self.vocab_overlap) {
            return fail(format!(
                "vocab_overlap must lie in [0, 1], got {}",
                self.vocab_overlap
            ));
        }
        if self.words_per_column == 0 {
            return fail("words_per_column must be positive".into());
        }
        if self.mapping == Mapping::Onto
            && (self.onto_drop_cols == 0 || self.onto_drop_cols >= self.cols)
        {
            return fail(format!(
                "onto_drop_cols must lie in 1..{}, got {}",
                self.cols, self.onto_drop_cols
            ));
        }
        TableRef::new(&self.lake_id, "x")?;
        let blocks = (self.n_sources() + self.noise_count() + 1) as u128;
        let needed = blocks * (self.cols as u128) * (self.words_per_column as u128 + 1);
        if needed > WORD_SPACE as u128 {
            return fail(format!(
                "configuration needs {needed} distinct words, only {WORD_SPACE} exist"
            ));
        }
        Ok(())
    }
}

/// Renders `n < WORD_SPACE` as a four-syllable word. Injective.
pub fn word(n: u64) -> String {
    debug_assert!(n < WORD_SPACE);
    let mut x = (n.wrapping_mul(SCRAMBLE) + 12_345) % WORD_SPACE;
    let mut out = String::with_capacity(2 * WORD_SYLLABLES as usize);
    for _ in 0..WORD_SYLLABLES {
        let s = (x % SYLLABLES) as usize;
        x /= SYLLABLES;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    out
}

/// Integer ids of block `block`'s word pool for value column `col`
/// (1-based). The first `shared` ids are common to every block.
fn pool(cfg: &SynthConfig, block: usize, col: usize) -> Vec<u64> {
    let w = cfg.words_per_column as u64;
    let cols = cfg.cols as u64;
    let col = col as u64;
    let shared = cfg.shared_words() as u64;
    let own_base = cols * w + block as u64 * cols * w + col * w;
    (0..shared)
        .map(|j| col * w + j)
        .chain((shared..w).map(|j| own_base + j))
        .collect()
}

/// Column names live above all pool ranges.
fn column_name(cfg: &SynthConfig, block: usize, col: usize) -> String {
    if col == 0 {
        return "key".into();
    }
    word(WORD_SPACE - 1 - (block * cfg.cols + col) as u64)
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(&(block as u64).to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv64(0x5717_7e5d, &bytes))
}

fn source_rows(
    cfg: &SynthConfig,
    block: usize,
    n_rows: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<String>> {
    let pools: Vec<Vec<u64>> = (1..cfg.cols).map(|c| pool(cfg, block, c)).collect();
    let key_base = (block as u64 + 1) * KEY_STRIDE;
    (0..n_rows)
        .map(|i| {
            let mut row = Vec::with_capacity(cfg.cols);
            row.push((key_base + i as u64).to_string());
            for p in &pools {
                row.push(word(p[rng.random_range(0..p.len())]));
            }
            row
        })
        .collect()
}

fn source_id(domain: usize, table: usize) -> String {
    format!("d{domain:03}_t{table:03}")
}

struct Block {
    query: Table,
    targets: Vec<Table>,
}

fn gen_source(cfg: &SynthConfig, block: usize) -> Result<Block> {
    let mut rng = block_rng(cfg.seed, block);
    let columns: Vec<String> = (0..cfg.cols).map(|c| column_name(cfg, block, c)).collect();
    let mut rows = source_rows(cfg, block, cfg.rows, &mut rng);
    rows.shuffle(&mut rng);
    let base = source_id(block / cfg.tables_per_domain, block % cfg.tables_per_domain);
    let size = cfg.rows / cfg.partitions;
    let mut parts = Vec::with_capacity(cfg.partitions);
    for p in 0..cfg.partitions {
        let end = if p + 1 == cfg.partitions {
            rows.len()
        } else {
            (p + 1) * size
        };
        parts.push(rows[p * size..end].to_vec());
    }
    let query = Table::new(
        TableRef::new(QUERY_LAKE, format!("{base}_p0"))?,
        columns.clone(),
        parts[0].clone(),
    )?;
    let mut targets = Vec::with_capacity(cfg.partitions - 1);
    for (p, part) in parts.into_iter().enumerate().skip(1) {
        let id = TableRef::new(&cfg.lake_id, format!("{base}_p{p}"))?;
        let table = match cfg.mapping {
            Mapping::OneToOne => Table::new(id, columns.clone(), part)?,
            Mapping::Onto => {
                let dropped: HashSet<usize> =
                    index::sample(&mut rng, cfg.cols - 1, cfg.onto_drop_cols)
                        .into_iter()
                        .map(|c| c + 1)
                        .collect();
                let keep: Vec<usize> = (0..cfg.cols).filter(|c| !dropped.contains(c)).collect();
                Table::new(
                    id,
                    keep.iter().map(|&c| columns[c].clone()).collect(),
                    part.iter()
                        .map(|r| keep.iter().map(|&c| r[c].clone()).collect())
                        .collect(),
                )?
            }
        };
        targets.push(table);
    }
    Ok(Block { query, targets })
}

fn gen_noise(cfg: &SynthConfig, i: usize) -> Result<Table> {
    let block = cfg.n_sources() + i;
    let mut rng = block_rng(cfg.seed, block);
    let columns = (0..cfg.cols).map(|c| column_name(cfg, block, c)).collect();
    let n_rows = (cfg.rows / cfg.partitions).max(1);
    let rows = source_rows(cfg, block, n_rows, &mut rng);
    Table::new(
        TableRef::new(&cfg.lake_id, format!("noise_{i:03}"))?,
        columns,
        rows,
    )
}

/// A generated corpus: query tables, lake tables and their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLake {
    pub queries: DataLake,
    pub datalake: DataLake,
    pub truth: GroundTruth,
}

impl SynthLake {
    pub fn query_ids(&self) -> Vec<String> {
        self.queries
            .tables
            .iter()
            .map(|t| t.table_ref.table_id().to_owned())
            .collect()
    }

    pub fn write(&self, layout: &CorpusLayout) -> Result<()> {
        write_corpus(layout, &self.queries, &self.datalake, &self.truth)
    }
}

pub fn generate_lake(cfg: &SynthConfig, exec: Exec) -> Result<SynthLake> {
    cfg.validate()?;
    let blocks = exec
        .map_range(cfg.n_sources(), |b| gen_source(cfg, b))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let noise = exec
        .map_range(cfg.noise_count(), |i| gen_noise(cfg, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut truth = GroundTruth::new();
    let mut queries = Vec::with_capacity(blocks.len());
    let mut targets = Vec::with_capacity(cfg.n_targets() + noise.len());
    for b in blocks {
        truth.insert(
            b.query.table_ref.table_id().to_owned(),
            b.targets
                .iter()
                .map(|t| t.table_ref.table_id().to_owned())
                .collect(),
        );
        queries.push(b.query);
        targets.extend(b.targets);
    }
    targets.extend(noise);
    Ok(SynthLake {
        queries: DataLake::new(QUERY_LAKE, queries, true)?,
        datalake: DataLake::new(&cfg.lake_id, targets, true)?,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Finding {
    NonRectangular { table: String, row: usize },
    DanglingQuery { query: String },
    DanglingTarget { query: String, table: String },
    Duplicate { table: String },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::NonRectangular { table, row } => write!(f, "{table}: row {row} is ragged"),
            Finding::DanglingQuery { query } => {
                write!(f, "ground truth names missing query {query}")
            }
            Finding::DanglingTarget { query, table } => {
                write!(f, "ground truth for {query} names missing table {table}")
            }
            Finding::Duplicate { table } => write!(f, "table id {table} appears more than once"),
        }
    }
}

/// Structural checks on a corpus. Returns diagnostics, never fails.
pub fn validate_lake(queries: &[Table], tables: &[Table], truth: &GroundTruth) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for t in queries.iter().chain(tables) {
        *counts
            .entry((t.table_ref.lake_id(), t.table_ref.table_id()))
            .or_default() += 1;
        if let Some(row) = t.rows.iter().position(|r| r.len() != t.columns.len()) {
            findings.push(Finding::NonRectangular {
                table: t.table_ref.key(),
                row,
            });
        }
    }
    for ((lake, id), n) in counts {
        if n > 1 {
            findings.push(Finding::Duplicate {
                table: format!("{lake}/{id}"),
            });
        }
    }
    let query_ids: BTreeSet<&str> = queries.iter().map(|t| t.table_ref.table_id()).collect();
    let table_ids: BTreeSet<&str> = tables.iter().map(|t| t.table_ref.table_id()).collect();
    for (q, ts) in truth {
        if !query_ids.contains(q.as_str()) {
            findings.push(Finding::DanglingQuery { query: q.clone() });
        }
        for t in ts.iter().filter(|t| !table_ids.contains(t.as_str())) {
            findings.push(Finding::DanglingTarget {
                query: q.clone(),
                table: t.clone(),
            });
        }
    }
    findings
}
