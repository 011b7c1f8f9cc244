//! Benchmark harness: standardized corpus layout, resumable step execution
//! with undo, prediction capture and MAP@k / AR@k evaluation.
//!
//! A prepared corpus looks like
//!
//! ```text
//! <lake>/query/*.csv        query tables
//! <lake>/datalake/*.csv     candidate tables (unionable or not)
//! <lake>/groundtruth.map    <query id>\t<table id>, one pair per line
//! ```
//!
//! and every approach writes `prediction.map` (`<query id>\t<rank>\t<table id>`)
//! into its run directory `<lake>/runs/<approach>/`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::time::Instant;

use crate::embed::ProviderConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::index::{read_store_files, write_records, HnswParams, Metric, StoreMeta, VectorStore};
use crate::search::{pipeline_fingerprint, query_topk, QueryOptions};
use crate::serialize::SamplerConfig;
use crate::table::{list_csv, load_table, Anonymizer, DataLake, RenameMap};

pub const QUERY_DIR: &str = "query";
pub const DATALAKE_DIR: &str = "datalake";
pub const GROUND_TRUTH: &str = "groundtruth.map";
pub const PREDICTION: &str = "prediction.map";
pub const STATUS: &str = "status.tsv";
pub const EXPERIMENTS: &str = "experiments.csv";
pub const TIMINGS: &str = "timings.csv";
pub const EXPERIMENTS_HEADER: &str = "approach,datalake,k,map,ar,excluded_queries";
pub const TIMINGS_HEADER: &str = "approach,datalake,step,phase,seconds";
/// `2^0 ..= 2^6`.
pub const DEFAULT_K_GRID: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Query table id to the ids of its unionable tables.
pub type GroundTruth = BTreeMap<String, BTreeSet<String>>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_ground_truth(text: &str) -> Result<GroundTruth> {
    let mut gt = GroundTruth::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (q, t) = line.split_once('\t').ok_or_else(|| {
            Error::Corpus(format!("ground truth line {}: expected two fields", n + 1))
        })?;
        gt.entry(q.to_owned()).or_default().insert(t.to_owned());
    }
    Ok(gt)
}

pub fn ground_truth_to_text(gt: &GroundTruth) -> String {
    let mut out = String::new();
    for (q, ts) in gt {
        for t in ts {
            out.push_str(&format!("{q}\t{t}\n"));
        }
    }
    out
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    parse_ground_truth(&read_text(path)?)
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_text(path, &ground_truth_to_text(gt))
}

/// Ranked predictions per query, best first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionSet(pub BTreeMap<String, Vec<String>>);

impl PredictionSet {
    pub fn insert(&mut self, query: impl Into<String>, ranked: Vec<String>) -> Result<()> {
        let query = query.into();
        let mut seen = HashSet::new();
        if let Some(dup) = ranked.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::Eval(format!("query {query}: {dup} predicted twice")));
        }
        self.0.insert(query, ranked);
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&[String]> {
        self.0.get(query).map(Vec::as_slice)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lists: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [q, rank, t] = fields[..] else {
                return Err(Error::Eval(format!(
                    "prediction line {}: expected three fields",
                    n + 1
                )));
            };
            let rank: usize = rank.parse().map_err(|_| {
                Error::Eval(format!("prediction line {}: bad rank {rank:?}", n + 1))
            })?;
            lists
                .entry(q.to_owned())
                .or_default()
                .push((rank, t.to_owned()));
        }
        let mut set = PredictionSet::default();
        for (q, mut entries) in lists {
            entries.sort_by_key(|e| e.0);
            if entries.iter().enumerate().any(|(i, e)| e.0 != i + 1) {
                return Err(Error::Eval(format!("query {q}: ranks are not 1..n")));
            }
            set.insert(q, entries.into_iter().map(|e| e.1).collect())?;
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (q, ranked) in &self.0 {
            for (i, t) in ranked.iter().enumerate() {
                out.push_str(&format!("{q}\t{}\t{t}\n", i + 1));
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        PredictionSet::parse(&read_text(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

/// Average precision at `k`, normalized by `min(k, k*)` where `k*` is the
/// number of relevant tables.
pub fn ap_at_k(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::ExcludedQuery("k*=0".into()));
    }
    let mut seen = HashSet::new();
    if ranking.iter().any(|t| !seen.insert(t)) {
        return Err(Error::Eval("ranking contains duplicates".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, t) in ranking.iter().take(k).enumerate() {
        if relevant.contains(t) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / k.min(relevant.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArMode {
    /// Hits divided by `k*`, in `[0, 1]`.
    #[default]
    Normalized,
    /// Raw hit count in the top k, averaged over queries.
    AsWritten,
}

impl FromStr for ArMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(ArMode::Normalized),
            "as-written" => Ok(ArMode::AsWritten),
            other => Err(Error::Config(format!("unknown recall mode {other:?}"))),
        }
    }
}

/// Recall-style score for one query.
pub fn recall_at_k(
    ranking: &[String],
    relevant: &BTreeSet<String>,
    k: usize,
    mode: ArMode,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::ExcludedQuery("k*=0".into()));
    }
    let hits = ranking
        .iter()
        .take(k)
        .filter(|t| relevant.contains(*t))
        .count() as f64;
    Ok(match mode {
        ArMode::Normalized => hits / relevant.len() as f64,
        ArMode::AsWritten => hits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub value: f64,
    pub included: usize,
    pub excluded: usize,
}

fn average<F>(
    predictions: &PredictionSet,
    truth: &GroundTruth,
    exec: Exec,
    per_query: F,
) -> Result<MetricSummary>
where
    F: Fn(&[String], &BTreeSet<String>) -> Result<f64> + Sync + Send,
{
    let entries: Vec<(&String, &Vec<String>)> = predictions.0.iter().collect();
    let empty = BTreeSet::new();
    let scores = exec.map(&entries, |(q, ranked)| {
        let relevant = truth.get(q.as_str()).unwrap_or(&empty);
        match per_query(ranked, relevant) {
            Ok(v) => Ok(Some(v)),
            Err(Error::ExcludedQuery(_)) => Ok(None),
            Err(e) => Err(Error::Eval(format!("query {q}: {e}"))),
        }
    });
    let mut sum = 0.0;
    let mut included = 0;
    let mut excluded = 0;
    for s in scores {
        match s? {
            Some(v) => {
                sum += v;
                included += 1;
            }
            None => excluded += 1,
        }
    }
    if included == 0 {
        return Err(Error::Eval("no query has a non-empty ground truth".into()));
    }
    Ok(MetricSummary {
        value: sum / included as f64,
        included,
        excluded,
    })
}

/// Mean of [`ap_at_k`] over queries with at least one relevant table.
pub fn map_at_k(
    predictions: &PredictionSet,
    truth: &GroundTruth,
    k: usize,
    exec: Exec,
) -> Result<MetricSummary> {
    average(predictions, truth, exec, |r, rel| ap_at_k(r, rel, k))
}

pub fn ar_at_k(
    predictions: &PredictionSet,
    truth: &GroundTruth,
    k: usize,
    mode: ArMode,
    exec: Exec,
) -> Result<MetricSummary> {
    average(predictions, truth, exec, |r, rel| {
        recall_at_k(r, rel, k, mode)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Offline,
    Online,
}

impl Phase {
    /// Default phase for a step name: only querying counts as online.
    pub fn of_step(name: &str) -> Phase {
        if name == "query" {
            Phase::Online
        } else {
            Phase::Offline
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Phase::Offline),
            "online" => Ok(Phase::Online),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub approach: String,
    pub lake: String,
    pub k: usize,
    pub map: f64,
    pub ar: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub approach: String,
    pub lake: String,
    pub step: String,
    pub phase: Phase,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub timings: Vec<TimingRow>,
}

impl EvalReport {
    pub fn phase_seconds(&self, phase: Phase) -> f64 {
        self.timings
            .iter()
            .filter(|t| t.phase == phase)
            .map(|t| t.seconds)
            .sum()
    }

    pub fn map_at(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.map)
    }

    pub fn experiments_csv(&self) -> String {
        let mut out = format!("{EXPERIMENTS_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.approach, r.lake, r.k, r.map, r.ar, r.excluded
            ));
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = format!("{TIMINGS_HEADER}\n");
        for t in &self.timings {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                t.approach, t.lake, t.step, t.phase, t.seconds
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(EXPERIMENTS), &self.experiments_csv())?;
        write_text(&dir.join(TIMINGS), &self.timings_csv())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSpec<'a> {
    pub approach: &'a str,
    pub lake: &'a str,
    pub k_grid: &'a [usize],
    pub ar_mode: ArMode,
}

/// Scores predictions for every `k` in the grid. Every query in `queries`
/// must have a prediction entry.
pub fn evaluate(
    predictions: &PredictionSet,
    truth: &GroundTruth,
    queries: &[String],
    spec: &EvalSpec,
    timings: &[(String, Phase, f64)],
    exec: Exec,
) -> Result<EvalReport> {
    if let Some(missing) = queries.iter().find(|q| predictions.get(q).is_none()) {
        return Err(Error::Eval(format!("no prediction for query {missing}")));
    }
    let mut rows = Vec::with_capacity(spec.k_grid.len());
    for &k in spec.k_grid {
        let map = map_at_k(predictions, truth, k, exec)?;
        let ar = ar_at_k(predictions, truth, k, spec.ar_mode, exec)?;
        rows.push(MetricRow {
            approach: spec.approach.to_owned(),
            lake: spec.lake.to_owned(),
            k,
            map: map.value,
            ar: ar.value,
            excluded: map.excluded,
        });
    }
    let timings = timings
        .iter()
        .map(|(step, phase, seconds)| TimingRow {
            approach: spec.approach.to_owned(),
            lake: spec.lake.to_owned(),
            step: step.clone(),
            phase: *phase,
            seconds: *seconds,
        })
        .collect();
    Ok(EvalReport { rows, timings })
}

/// Parses a comma-separated k grid such as `1,2,4`.
pub fn parse_k_grid(s: &str) -> Result<Vec<usize>> {
    let grid: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad k grid {s:?}")))?;
    if grid.is_empty() || grid.contains(&0) {
        return Err(Error::Config(format!("bad k grid {s:?}")));
    }
    Ok(grid)
}

/// Standardized on-disk corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

fn stems(dir: &Path) -> Result<Vec<String>> {
    Ok(list_csv(dir)?
        .iter()
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_owned))
        .collect())
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CorpusLayout { root: root.into() }
    }

    pub fn query_dir(&self) -> PathBuf {
        self.root.join(QUERY_DIR)
    }

    pub fn datalake_dir(&self) -> PathBuf {
        self.root.join(DATALAKE_DIR)
    }

    pub fn truth_path(&self) -> PathBuf {
        self.root.join(GROUND_TRUTH)
    }

    pub fn run_dir(&self, approach: &str) -> PathBuf {
        self.root.join("runs").join(approach)
    }

    /// Lake name used in composite keys and reports: the root directory name.
    pub fn lake_name(&self) -> String {
        self.root
            .canonicalize()
            .ok()
            .as_deref()
            .unwrap_or(&self.root)
            .file_name()
            .and_then(|s| s.to_str())
            .map(|s| s.replace(['/', '\t', '\n', '\r'], "_"))
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "lake".into())
    }

    pub fn is_prepared(&self) -> bool {
        self.truth_path().is_file() && self.query_dir().is_dir() && self.datalake_dir().is_dir()
    }

    pub fn query_ids(&self) -> Result<Vec<String>> {
        stems(&self.query_dir())
    }

    pub fn table_ids(&self) -> Result<Vec<String>> {
        stems(&self.datalake_dir())
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        read_ground_truth(&self.truth_path())
    }

    /// Checks that ground-truth keys are query files and values are lake files.
    pub fn validate(&self) -> Result<()> {
        if !self.is_prepared() {
            return Err(Error::Corpus(format!(
                "{} is not a prepared corpus",
                self.root.display()
            )));
        }
        check_truth(
            &self.ground_truth()?,
            &self.query_ids()?.into_iter().collect(),
            &self.table_ids()?.into_iter().collect(),
        )
    }

    pub fn load_queries(&self, exec: Exec) -> Result<DataLake> {
        DataLake::load(&self.query_dir(), QUERY_DIR, exec)
    }

    pub fn load_datalake(&self, exec: Exec) -> Result<DataLake> {
        DataLake::load(&self.datalake_dir(), &self.lake_name(), exec)
    }
}

fn check_truth(
    gt: &GroundTruth,
    queries: &BTreeSet<String>,
    tables: &BTreeSet<String>,
) -> Result<()> {
    for (q, ts) in gt {
        if !queries.contains(q) {
            return Err(Error::Corpus(format!(
                "ground truth names missing query table {q}"
            )));
        }
        if let Some(t) = ts.iter().find(|t| !tables.contains(*t)) {
            return Err(Error::Corpus(format!(
                "ground truth for {q} names missing table {t}"
            )));
        }
    }
    Ok(())
}

/// Copies a raw lake into the standard layout: files named in `queries` go
/// to `query/`, the rest to `datalake/`. Returns `false` when the corpus was
/// already prepared and `force` is off.
pub fn prepare_corpus(
    raw_dir: &Path,
    queries: &[String],
    truth_source: &Path,
    out: &CorpusLayout,
    force: bool,
) -> Result<bool> {
    if out.is_prepared() && !force {
        return Ok(false);
    }
    let files = list_csv(raw_dir)?;
    let wanted: BTreeSet<&str> = queries.iter().map(String::as_str).collect();
    let mut query_files = Vec::new();
    let mut lake_files = Vec::new();
    for f in files {
        let stem = f
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_owned();
        if wanted.contains(stem.as_str()) {
            query_files.push((stem, f));
        } else {
            lake_files.push((stem, f));
        }
    }
    let found: BTreeSet<&str> = query_files.iter().map(|(s, _)| s.as_str()).collect();
    if let Some(q) = wanted.iter().find(|q| !found.contains(*q)) {
        return Err(Error::Corpus(format!(
            "query table {q} not found in {}",
            raw_dir.display()
        )));
    }
    for (_, f) in query_files.iter().chain(&lake_files) {
        load_table(f, "raw")?;
    }
    let gt = read_ground_truth(truth_source)?;
    check_truth(
        &gt,
        &query_files.iter().map(|(s, _)| s.clone()).collect(),
        &lake_files.iter().map(|(s, _)| s.clone()).collect(),
    )?;
    for dir in [out.query_dir(), out.datalake_dir()] {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (files, dir) in [
        (&query_files, out.query_dir()),
        (&lake_files, out.datalake_dir()),
    ] {
        for (stem, f) in files {
            let dest = dir.join(format!("{stem}.csv"));
            fs::copy(f, &dest).map_err(|e| Error::io(&dest, e))?;
        }
    }
    write_ground_truth(&out.truth_path(), &gt)?;
    Ok(true)
}

/// Metadata-stripped copy of a corpus with ground truth rewritten to the new ids.
#[derive(Debug, Clone)]
pub struct StrippedCorpus {
    pub queries: DataLake,
    pub datalake: DataLake,
    pub truth: GroundTruth,
    pub query_renames: RenameMap,
    pub table_renames: RenameMap,
}

/// Anonymizes queries and lake with one id generator, so ids never repeat
/// across the two directories.
pub fn strip_corpus(
    queries: &DataLake,
    datalake: &DataLake,
    truth: &GroundTruth,
    seed: u64,
) -> Result<StrippedCorpus> {
    let mut anon = Anonymizer::new(seed);
    let (queries, query_renames) = anon.strip(queries)?;
    let (datalake, table_renames) = anon.strip(datalake)?;
    let rename = |map: &RenameMap, id: &str| {
        map.get(id)
            .map(str::to_owned)
            .ok_or_else(|| Error::Corpus(format!("ground truth names unknown table {id}")))
    };
    let mut new_truth = GroundTruth::new();
    for (q, ts) in truth {
        let targets = ts
            .iter()
            .map(|t| rename(&table_renames, t))
            .collect::<Result<_>>()?;
        new_truth.insert(rename(&query_renames, q)?, targets);
    }
    Ok(StrippedCorpus {
        queries,
        datalake,
        truth: new_truth,
        query_renames,
        table_renames,
    })
}

/// Writes queries, lake and ground truth into `layout`, replacing any
/// previous table directories.
pub fn write_corpus(
    layout: &CorpusLayout,
    queries: &DataLake,
    datalake: &DataLake,
    truth: &GroundTruth,
) -> Result<()> {
    for dir in [layout.query_dir(), layout.datalake_dir()] {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    queries.write(&layout.query_dir())?;
    datalake.write(&layout.datalake_dir())?;
    write_ground_truth(&layout.truth_path(), truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Pending,
    Done,
    Failed,
}

impl fmt::Display for StepStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepStatus::Pending => "pending",
            StepStatus::Done => "done",
            StepStatus::Failed => "failed",
        })
    }
}

impl FromStr for StepStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(StepStatus::Pending),
            "done" => Ok(StepStatus::Done),
            "failed" => Ok(StepStatus::Failed),
            other => Err(Error::Config(format!("unknown step status {other:?}"))),
        }
    }
}

pub trait StepAction: Send {
    fn execute(&mut self) -> Result<()>;
    fn undo(&mut self) -> Result<()>;
}

struct FnAction<E, U> {
    execute: E,
    undo: U,
}

impl<E, U> StepAction for FnAction<E, U>
where
    E: FnMut() -> Result<()> + Send,
    U: FnMut() -> Result<()> + Send,
{
    fn execute(&mut self) -> Result<()> {
        (self.execute)()
    }

    fn undo(&mut self) -> Result<()> {
        (self.undo)()
    }
}

/// Runs shell command lines through `sh -c` in a fixed working directory.
pub struct CommandAction {
    pub execute: String,
    pub undo: String,
    pub cwd: PathBuf,
}

impl CommandAction {
    fn run(&self, line: &str) -> Result<()> {
        if line.trim().is_empty() {
            return Ok(());
        }
        let status = Command::new("sh")
            .arg("-c")
            .arg(line)
            .current_dir(&self.cwd)
            .status()
            .map_err(|e| Error::io(&self.cwd, e))?;
        if status.success() {
            Ok(())
        } else {
            Err(Error::Config(format!("`{line}` exited with {status}")))
        }
    }
}

impl StepAction for CommandAction {
    fn execute(&mut self) -> Result<()> {
        self.run(&self.execute.clone())
    }

    fn undo(&mut self) -> Result<()> {
        self.run(&self.undo.clone())
    }
}

pub struct Step {
    pub name: String,
    pub phase: Phase,
    action: Box<dyn StepAction>,
}

impl Step {
    pub fn new(name: impl Into<String>, phase: Phase, action: Box<dyn StepAction>) -> Self {
        Step {
            name: name.into(),
            phase,
            action,
        }
    }

    pub fn from_fns<E, U>(name: impl Into<String>, phase: Phase, execute: E, undo: U) -> Self
    where
        E: FnMut() -> Result<()> + Send + 'static,
        U: FnMut() -> Result<()> + Send + 'static,
    {
        Step::new(name, phase, Box::new(FnAction { execute, undo }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepState {
    pub status: StepStatus,
    pub seconds: Option<f64>,
}

/// Reads step definitions: `name<TAB>phase<TAB>execute<TAB>undo` per line,
/// `#` starts a comment.
pub fn load_command_steps(path: &Path, cwd: &Path) -> Result<Vec<Step>> {
    let text = read_text(path)?;
    let mut steps = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        let [name, phase, execute, undo] = fields[..] else {
            return Err(Error::Config(format!(
                "{}:{}: expected four fields",
                path.display(),
                n + 1
            )));
        };
        steps.push(Step::new(
            name,
            phase.parse()?,
            Box::new(CommandAction {
                execute: execute.to_owned(),
                undo: undo.to_owned(),
                cwd: cwd.to_path_buf(),
            }),
        ));
    }
    Ok(steps)
}

/// Ordered steps plus their persisted status.
pub struct StepPlan {
    steps: Vec<Step>,
    states: BTreeMap<String, StepState>,
    status_path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOutcome {
    pub executed: Vec<String>,
    pub undone: Vec<String>,
    pub skipped: Vec<String>,
}

impl StepPlan {
    /// Builds a plan, picking up state from `status_path` if it exists.
    pub fn new(steps: Vec<Step>, status_path: impl Into<PathBuf>) -> Result<Self> {
        let status_path = status_path.into();
        let mut names = HashSet::new();
        if let Some(dup) = steps.iter().find(|s| !names.insert(s.name.clone())) {
            return Err(Error::Config(format!("step {} defined twice", dup.name)));
        }
        let mut states: BTreeMap<String, StepState> = steps
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    StepState {
                        status: StepStatus::Pending,
                        seconds: None,
                    },
                )
            })
            .collect();
        if status_path.is_file() {
            for line in read_text(&status_path)?.lines() {
                let fields: Vec<&str> = line.split('\t').collect();
                if let [name, status, seconds] = fields[..] {
                    if let Some(state) = states.get_mut(name) {
                        state.status = status.parse()?;
                        state.seconds = seconds.parse().ok();
                    }
                }
            }
        }
        Ok(StepPlan {
            steps,
            states,
            status_path,
        })
    }

    pub fn status(&self, name: &str) -> Option<StepStatus> {
        self.states.get(name).map(|s| s.status)
    }

    pub fn state(&self, name: &str) -> Option<StepState> {
        self.states.get(name).copied()
    }

    pub fn step_names(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.name.clone()).collect()
    }

    /// Recorded wall time of every step that has one, in plan order.
    pub fn timings(&self) -> Vec<(String, Phase, f64)> {
        self.steps
            .iter()
            .filter_map(|s| {
                let secs = self.states.get(&s.name)?.seconds?;
                Some((s.name.clone(), s.phase, secs))
            })
            .collect()
    }

    fn persist(&self) -> Result<()> {
        let mut text = String::new();
        for s in &self.steps {
            let st = self.states[&s.name];
            let secs = st
                .seconds
                .map(|x| format!("{x:.6}"))
                .unwrap_or_else(|| "-".into());
            text.push_str(&format!("{}\t{}\t{secs}\n", s.name, st.status));
        }
        let tmp = self.status_path.with_extension("tmp");
        write_text(&tmp, &text)?;
        fs::rename(&tmp, &self.status_path).map_err(|e| Error::io(&self.status_path, e))
    }

    /// Runs pending steps in order. Done steps are skipped unless named in
    /// `rerun`; rerun and previously failed steps are undone before they
    /// execute again. Halts at the first failure.
    pub fn run(&mut self, rerun: &BTreeSet<String>) -> Result<RunOutcome> {
        if let Some(unknown) = rerun.iter().find(|r| !self.states.contains_key(*r)) {
            return Err(Error::Config(format!("unknown step {unknown}")));
        }
        let mut outcome = RunOutcome::default();
        for i in 0..self.steps.len() {
            let name = self.steps[i].name.clone();
            let status = self.states[&name].status;
            let forced = rerun.contains(&name);
            if status == StepStatus::Done && !forced {
                outcome.skipped.push(name);
                continue;
            }
            if forced || status == StepStatus::Failed {
                self.steps[i].action.undo().map_err(|e| Error::StepFailed {
                    step: name.clone(),
                    message: format!("undo: {e}"),
                })?;
                outcome.undone.push(name.clone());
                self.states.insert(
                    name.clone(),
                    StepState {
                        status: StepStatus::Pending,
                        seconds: None,
                    },
                );
                self.persist()?;
            }
            let start = Instant::now();
            let result = self.steps[i].action.execute();
            let seconds = start.elapsed().as_secs_f64();
            match result {
                Ok(()) => {
                    self.states.insert(
                        name.clone(),
                        StepState {
                            status: StepStatus::Done,
                            seconds: Some(seconds),
                        },
                    );
                    self.persist()?;
                    outcome.executed.push(name);
                }
                Err(e) => {
                    self.states.insert(
                        name.clone(),
                        StepState {
                            status: StepStatus::Failed,
                            seconds: None,
                        },
                    );
                    self.persist()?;
                    return Err(Error::StepFailed {
                        step: name,
                        message: e.to_string(),
                    });
                }
            }
        }
        Ok(outcome)
    }
}

/// Settings for the built-in embedding-search approach.
#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub sampler: SamplerConfig,
    pub provider: ProviderConfig,
    pub metric: Metric,
    pub hnsw: HnswParams,
    /// Length of each predicted list.
    pub k_max: usize,
    /// Use exhaustive search instead of the graph.
    pub exact: bool,
    pub exec: Exec,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            sampler: SamplerConfig::default(),
            provider: ProviderConfig::default(),
            metric: Metric::Cosine,
            hnsw: HnswParams::default(),
            k_max: 64,
            exact: false,
            exec: Exec::default(),
        }
    }
}

fn remove_path(p: &Path) -> Result<()> {
    let res = if p.is_dir() {
        fs::remove_dir_all(p)
    } else if p.exists() {
        fs::remove_file(p)
    } else {
        return Ok(());
    };
    res.map_err(|e| Error::io(p, e))
}

/// The embed → index → query plan, with each step writing one artifact
/// into `run_dir` and its undo deleting it.
pub fn pipeline_plan(
    layout: &CorpusLayout,
    run_dir: &Path,
    settings: &PipelineSettings,
) -> Result<StepPlan> {
    settings.sampler.validate()?;
    settings.provider.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let embeddings = run_dir.join("embeddings");
    let store_dir = run_dir.join("store");
    let prediction = run_dir.join(PREDICTION);

    let embed_step = {
        let (layout, s, out) = (layout.clone(), settings.clone(), embeddings.clone());
        let undo_path = embeddings.clone();
        Step::from_fns(
            "embed",
            Phase::Offline,
            move || {
                let provider = s.provider.build()?;
                let lake = layout.load_datalake(s.exec)?;
                let records = crate::embed::embed_tables(
                    &lake.tables,
                    &s.sampler,
                    provider.as_ref(),
                    s.exec,
                )?;
                let mut meta = StoreMeta::new(provider.dimension(), s.metric, provider.model_id());
                meta.hnsw = s.hnsw;
                meta.config = pipeline_fingerprint(&s.sampler, provider.as_ref());
                write_records(&out, &meta, &records)
            },
            move || remove_path(&undo_path),
        )
    };
    let index_step = {
        let (from, to) = (embeddings.clone(), store_dir.clone());
        let undo_path = store_dir.clone();
        Step::from_fns(
            "index",
            Phase::Offline,
            move || {
                let (meta, records) = read_store_files(&from)?;
                VectorStore::from_records(meta, records)?.persist(&to)
            },
            move || remove_path(&undo_path),
        )
    };
    let query_step = {
        let (layout, s, store_path, out) = (
            layout.clone(),
            settings.clone(),
            store_dir,
            prediction.clone(),
        );
        Step::from_fns(
            "query",
            Phase::Online,
            move || {
                let provider = s.provider.build()?;
                let store = VectorStore::load(&store_path)?.with_exec(Exec::Sequential);
                let queries = layout.load_queries(s.exec)?;
                let opts = QueryOptions {
                    k: s.k_max,
                    metric: s.metric,
                    lakes: None,
                    include_self: false,
                    exact: s.exact,
                };
                let results = s.exec.try_map(&queries.tables, |q| {
                    query_topk(q, &store, provider.as_ref(), &s.sampler, &opts)
                })?;
                let mut preds = PredictionSet::default();
                for r in results {
                    preds.insert(
                        r.query_ref.table_id(),
                        r.neighbors
                            .iter()
                            .map(|n| n.table_ref.table_id().to_owned())
                            .collect(),
                    )?;
                }
                preds.write(&out)
            },
            move || remove_path(&prediction),
        )
    };
    StepPlan::new(
        vec![embed_step, index_step, query_step],
        run_dir.join(STATUS),
    )
}
