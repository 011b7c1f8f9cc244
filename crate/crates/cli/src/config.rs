//! `key = value` run configuration shared by every subcommand.
//!
//! Blank lines and lines starting with `#` are ignored. Flags given on the
//! command line are applied after the file, so they win.

use std::fs;
use std::path::Path;

use tus_forge_core::bench::{parse_k_grid, ArMode, DEFAULT_K_GRID};
use tus_forge_core::embed::ProviderConfig;
use tus_forge_core::index::{HnswParams, Metric};
use tus_forge_core::serialize::SamplerConfig;
use tus_forge_core::{Error, Exec, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub provider: ProviderConfig,
    pub hnsw: HnswParams,
    pub metric: Metric,
    pub k_grid: Vec<usize>,
    pub ar_mode: ArMode,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sampler: SamplerConfig::default(),
            provider: ProviderConfig::default(),
            hnsw: HnswParams::default(),
            metric: Metric::Cosine,
            k_grid: DEFAULT_K_GRID.to_vec(),
            ar_mode: ArMode::Normalized,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Undoes the escapes a config value may use for separators.
fn unescape(value: &str) -> String {
    value.replace("\\t", "\t").replace("\\n", "\n")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    n + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "parallel" => {
                self.exec = if parse::<bool>(key, value)? {
                    Exec::Parallel
                } else {
                    Exec::Sequential
                }
            }
            "sampler.rows" => self.sampler.rows = parse(key, value)?,
            "sampler.seed" => self.sampler.seed = parse(key, value)?,
            "sampler.sep" => self.sampler.sep = unescape(value),
            "sampler.newline" => self.sampler.newline = unescape(value),
            "provider.kind" => self.provider.kind = value.parse()?,
            "provider.model" => self.provider.model = value.to_owned(),
            "provider.dim" => self.provider.dim = parse(key, value)?,
            "provider.limit_n" => self.provider.limit_n = parse(key, value)?,
            "provider.limit_m" => self.provider.limit_m = parse(key, value)?,
            "provider.seed" => self.provider.seed = parse(key, value)?,
            "provider.endpoint" => self.provider.endpoint = Some(value.to_owned()),
            "provider.credential_env" => self.provider.credential_env = Some(value.to_owned()),
            "index.metric" => self.metric = value.parse()?,
            "index.max_connections" => self.hnsw.max_connections = parse(key, value)?,
            "index.ef_construction" => self.hnsw.ef_construction = parse(key, value)?,
            "index.ef_search" => self.hnsw.ef_search = parse(key, value)?,
            "index.exhaustive_below" => self.hnsw.exhaustive_below = parse(key, value)?,
            "index.seed" => self.hnsw.seed = parse(key, value)?,
            "bench.k" => self.k_grid = parse_k_grid(value)?,
            "bench.ar_mode" => self.ar_mode = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `(key, Some(value))` overrides, skipping `None`.
    pub fn apply<'a, I>(&mut self, overrides: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, Option<String>)>,
    {
        for (key, value) in overrides {
            if let Some(v) = value {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.provider.validate()?;
        self.hnsw.validate()
    }
}
