//! Data-lake tables: identity, CSV ingestion and metadata stripping.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Composite identity of a table: the lake it lives in plus its file stem.
///
/// Ordered by the rendered `lake/table` key so that tie-breaking in ranked
/// output matches a plain string sort of composite keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TableRef {
    lake_id: String,
    table_id: String,
}

fn check_component(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::InvalidRef(format!("empty {kind}")));
    }
    if s.contains(['/', '\t', '\n', '\r']) {
        return Err(Error::InvalidRef(format!(
            "{kind} {s:?} contains '/', tab or newline"
        )));
    }
    Ok(())
}

impl TableRef {
    pub fn new(lake_id: impl Into<String>, table_id: impl Into<String>) -> Result<Self> {
        let lake_id = lake_id.into();
        let table_id = table_id.into();
        check_component("lake id", &lake_id)?;
        check_component("table id", &table_id)?;
        Ok(TableRef { lake_id, table_id })
    }

    /// Parses a `lake/table` composite key.
    pub fn parse(key: &str) -> Result<Self> {
        match key.split_once('/') {
            Some((lake, table)) => TableRef::new(lake, table),
            None => Err(Error::InvalidRef(format!(
                "{key:?} is not a lake/table key"
            ))),
        }
    }

    pub fn lake_id(&self) -> &str {
        &self.lake_id
    }

    pub fn table_id(&self) -> &str {
        &self.table_id
    }

    pub fn key(&self) -> String {
        format!("{}/{}", self.lake_id, self.table_id)
    }

    fn key_bytes(&self) -> impl Iterator<Item = u8> + '_ {
        self.lake_id
            .bytes()
            .chain(std::iter::once(b'/'))
            .chain(self.table_id.bytes())
    }
}

impl fmt::Display for TableRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.lake_id, self.table_id)
    }
}

impl Ord for TableRef {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_bytes().cmp(other.key_bytes())
    }
}

impl PartialOrd for TableRef {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A rectangular table of text cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub table_ref: TableRef,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Builds a table, rejecting zero columns, ragged rows and repeated
    /// column names.
    pub fn new(table_ref: TableRef, columns: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::MalformedTable(format!("{table_ref}: zero columns")));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = columns.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::MalformedTable(format!(
                "{table_ref}: duplicate column name {dup:?}"
            )));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(Error::MalformedTable(format!(
                "{table_ref}: row {i} has {} cells, expected {}",
                rows[i].len(),
                columns.len()
            )));
        }
        Ok(Table {
            table_ref,
            columns,
            rows,
        })
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_rectangular(&self) -> bool {
        self.rows.iter().all(|r| r.len() == self.columns.len())
    }
}

pub fn synthetic_columns(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("col_{i}")).collect()
}

fn is_numeric(cell: &str) -> bool {
    let s = cell.trim();
    s.bytes().any(|b| b.is_ascii_digit()) && s.parse::<f64>().is_ok()
}

/// Header rule: the first row has no numeric cell and every later row has one.
fn looks_like_header(records: &[Vec<String>]) -> bool {
    match records.split_first() {
        Some((first, rest)) => {
            !first.iter().any(|c| is_numeric(c))
                && rest.iter().all(|r| r.iter().any(|c| is_numeric(c)))
        }
        None => false,
    }
}

/// Makes header names usable as column names: blanks become `col_i`,
/// repeats get a numeric suffix.
fn normalize_header(mut header: Vec<String>, n_cols: usize) -> Vec<String> {
    header.resize(n_cols, String::new());
    let mut seen = HashSet::new();
    header
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let base = if name.trim().is_empty() {
                format!("col_{i}")
            } else {
                name
            };
            let mut candidate = base.clone();
            let mut n = 1;
            while !seen.insert(candidate.clone()) {
                candidate = format!("{base}_{n}");
                n += 1;
            }
            candidate
        })
        .collect()
}

/// Parses comma-separated bytes into a table. Invalid UTF-8 is replaced,
/// ragged rows are padded with empty cells.
pub fn parse_table(table_ref: TableRef, bytes: &[u8]) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records: Vec<Vec<String>> = Vec::new();
    for rec in reader.byte_records() {
        let rec = rec.map_err(|e| Error::MalformedTable(format!("{table_ref}: {e}")))?;
        records.push(
            rec.iter()
                .map(|f| String::from_utf8_lossy(f).into_owned())
                .collect(),
        );
    }
    let n_cols = records.iter().map(Vec::len).max().unwrap_or(0);
    if n_cols == 0 {
        return Err(Error::MalformedTable(format!("{table_ref}: zero columns")));
    }
    for r in &mut records {
        r.resize(n_cols, String::new());
    }
    let columns = if looks_like_header(&records) {
        normalize_header(records.remove(0), n_cols)
    } else {
        synthetic_columns(n_cols)
    };
    Table::new(table_ref, columns, records)
}

fn table_id_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::InvalidRef(format!("cannot derive table id from {}", path.display())))
}

/// Loads one CSV file; the table id is the file name without extension.
pub fn load_table(path: &Path, lake_id: &str) -> Result<Table> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let table_ref = TableRef::new(lake_id, table_id_of(path)?)?;
    parse_table(table_ref, &bytes)
}

/// Writes a table as CSV with its column names as the header row.
pub fn write_table(table: &Table, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(&table.columns)
        .map_err(|e| csv_io(path, e))?;
    for row in &table.rows {
        w.write_record(row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Sorted list of `*.csv` files directly inside `dir`.
pub fn list_csv(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_csv = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataLake {
    pub lake_id: String,
    pub tables: Vec<Table>,
    pub has_metadata: bool,
}

impl DataLake {
    pub fn new(lake_id: impl Into<String>, tables: Vec<Table>, has_metadata: bool) -> Result<Self> {
        let lake_id = lake_id.into();
        let mut seen = HashSet::new();
        for t in &tables {
            if t.table_ref.lake_id() != lake_id {
                return Err(Error::InvalidRef(format!(
                    "table {} does not belong to lake {lake_id}",
                    t.table_ref
                )));
            }
            if !seen.insert(t.table_ref.table_id()) {
                return Err(Error::Duplicate(t.table_ref.key()));
            }
        }
        Ok(DataLake {
            lake_id,
            tables,
            has_metadata,
        })
    }

    /// Loads every CSV in `dir`, in file-name order.
    pub fn load(dir: &Path, lake_id: &str, exec: Exec) -> Result<Self> {
        let files = list_csv(dir)?;
        let tables = exec.try_map(&files, |p| load_table(p, lake_id))?;
        DataLake::new(lake_id, tables, true)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in &self.tables {
            write_table(t, &dir.join(format!("{}.csv", t.table_ref.table_id())))?;
        }
        Ok(())
    }

    pub fn get(&self, table_id: &str) -> Option<&Table> {
        self.tables
            .iter()
            .find(|t| t.table_ref.table_id() == table_id)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

/// Old table id to anonymized table id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RenameMap(pub BTreeMap<String, String>);

impl RenameMap {
    pub fn get(&self, old: &str) -> Option<&str> {
        self.0.get(old).map(String::as_str)
    }

    pub fn invert(&self) -> RenameMap {
        RenameMap(self.0.iter().map(|(a, b)| (b.clone(), a.clone())).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        self.0.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }
}

/// Draws unique 16-hex-digit ids. One instance can span several lakes so
/// that ids stay distinct across a whole corpus.
pub struct Anonymizer {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Anonymizer {
    pub fn new(seed: u64) -> Self {
        Anonymizer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: HashSet::new(),
        }
    }

    pub fn next_id(&mut self) -> String {
        loop {
            let id = format!("{:016x}", self.rng.random::<u64>());
            if self.used.insert(id.clone()) {
                return id;
            }
        }
    }

    pub fn strip(&mut self, lake: &DataLake) -> Result<(DataLake, RenameMap)> {
        if lake.is_empty() {
            return Err(Error::Config(format!("lake {} is empty", lake.lake_id)));
        }
        let mut renames = RenameMap::default();
        let mut tables = Vec::with_capacity(lake.tables.len());
        for t in &lake.tables {
            let new_id = self.next_id();
            renames
                .0
                .insert(t.table_ref.table_id().to_owned(), new_id.clone());
            tables.push(Table {
                table_ref: TableRef::new(&lake.lake_id, new_id)?,
                columns: synthetic_columns(t.n_cols()),
                rows: t.rows.clone(),
            });
        }
        Ok((
            DataLake {
                lake_id: lake.lake_id.clone(),
                tables,
                has_metadata: false,
            },
            renames,
        ))
    }
}

/// Replaces table names with seeded hex ids and column names with `col_i`.
/// Cell values are untouched.
pub fn strip_metadata(lake: &DataLake, seed: u64) -> Result<(DataLake, RenameMap)> {
    Anonymizer::new(seed).strip(lake)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn parse(s: &str) -> Result<Table> {
        parse_table(TableRef::new("lake", "t").unwrap(), s.as_bytes())
    }

    #[test]
    fn header_detected_when_only_first_row_is_textual() {
        let t = parse("zip,city\n67655,Kaiserslautern\n60311,Frankfurt\n99084,Erfurt\n").unwrap();
        assert_eq!(t.columns, ["zip", "city"]);
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.rows[0], ["67655", "Kaiserslautern"]);
    }

    #[test]
    fn no_header_when_all_rows_textual() {
        let t = parse("a,b\nc,d\n").unwrap();
        assert_eq!(t.columns, ["col_0", "col_1"]);
        assert_eq!(t.n_rows(), 2);
    }

    #[test]
    fn no_header_when_first_row_numeric() {
        let t = parse("1,2\nx,3\n").unwrap();
        assert_eq!(t.columns, ["col_0", "col_1"]);
        assert_eq!(t.n_rows(), 2);
    }

    #[test]
    fn special_float_words_are_not_numbers() {
        assert!(!is_numeric("inf"));
        assert!(!is_numeric("NaN"));
        assert!(is_numeric(" 3.5e2 "));
        assert!(!is_numeric(""));
    }

    #[test]
    fn ragged_rows_are_padded() {
        let t = parse("a,b\nc\n").unwrap();
        assert_eq!(t.rows[1], ["c", ""]);
        assert!(t.is_rectangular());
    }

    #[test]
    fn empty_file_is_malformed() {
        assert!(matches!(parse(""), Err(Error::MalformedTable(_))));
    }

    #[test]
    fn duplicate_header_names_are_suffixed() {
        let t = parse("name,name,\nx,1,y\n").unwrap();
        assert_eq!(t.columns, ["name", "name_1", "col_2"]);
    }

    #[test]
    fn invalid_utf8_is_replaced() {
        let t = parse_table(TableRef::new("l", "t").unwrap(), b"x,y\na\xff,b\n").unwrap();
        assert_eq!(t.rows[1][0], "a\u{fffd}");
    }

    #[test]
    fn load_table_uses_file_stem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cities.csv");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "zip,city\n1,a\n2,b\n3,c").unwrap();
        let t = load_table(&path, "hesse").unwrap();
        assert_eq!(t.table_ref.key(), "hesse/cities");
        assert_eq!(t.n_rows(), 3);
        assert!(matches!(
            load_table(&dir.path().join("missing.csv"), "hesse"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn table_ref_validation_and_order() {
        assert!(TableRef::new("", "t").is_err());
        assert!(TableRef::new("l", "a/b").is_err());
        let a = TableRef::new("a", "x").unwrap();
        let ab = TableRef::new("a-b", "x").unwrap();
        // '-' sorts before '/', so the composite key of "a-b" comes first.
        assert!(ab < a);
        assert_eq!(TableRef::parse("a/x").unwrap(), a);
    }

    fn lake(n: usize) -> DataLake {
        let tables = (0..n)
            .map(|i| {
                Table::new(
                    TableRef::new("lake", format!("t{i}")).unwrap(),
                    vec!["zip".into(), "city".into()],
                    vec![vec![i.to_string(), "x".into()]],
                )
                .unwrap()
            })
            .collect();
        DataLake::new("lake", tables, true).unwrap()
    }

    #[test]
    fn strip_metadata_renames_tables_and_columns() {
        let l = lake(3);
        let (s, map) = strip_metadata(&l, 42).unwrap();
        assert!(!s.has_metadata);
        for (orig, new) in l.tables.iter().zip(&s.tables) {
            let id = new.table_ref.table_id();
            assert_eq!(id.len(), 16);
            assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
            assert_eq!(new.columns, ["col_0", "col_1"]);
            assert_eq!(new.rows, orig.rows);
            assert_eq!(map.get(orig.table_ref.table_id()), Some(id));
        }
        let (again, map2) = strip_metadata(&l, 42).unwrap();
        assert_eq!(again, s);
        assert_eq!(map, map2);
    }

    #[test]
    fn strip_metadata_ids_are_unique_and_invertible() {
        let l = lake(1000);
        let (s, map) = strip_metadata(&l, 7).unwrap();
        let ids: HashSet<_> = s.tables.iter().map(|t| t.table_ref.table_id()).collect();
        assert_eq!(ids.len(), 1000);
        let inv = map.invert();
        for (orig, new) in l.tables.iter().zip(&s.tables) {
            assert_eq!(
                inv.get(new.table_ref.table_id()),
                Some(orig.table_ref.table_id())
            );
        }
    }

    #[test]
    fn strip_metadata_rejects_empty_lake() {
        let empty = DataLake::new("lake", vec![], true).unwrap();
        assert!(strip_metadata(&empty, 1).is_err());
    }

    #[test]
    fn lake_rejects_duplicates() {
        let mut l = lake(2);
        l.tables[1] = l.tables[0].clone();
        assert!(matches!(
            DataLake::new("lake", l.tables, true),
            Err(Error::Duplicate(_))
        ));
    }
}
