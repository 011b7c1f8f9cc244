use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tus_forge_core::bench::{
    evaluate, load_command_steps, pipeline_plan, prepare_corpus, strip_corpus, write_corpus,
    CorpusLayout, EvalReport, EvalSpec, PipelineSettings, PredictionSet, StepPlan, EXPERIMENTS,
    EXPERIMENTS_HEADER, PREDICTION, STATUS, TIMINGS, TIMINGS_HEADER,
};
use tus_forge_core::embed::embed_tables;
use tus_forge_core::index::{
    read_manifest, read_store_files, write_records, StoreMeta, VectorStore,
};
use tus_forge_core::search::{
    add_table_incremental, check_symmetry, pipeline_fingerprint, query_topk, QueryOptions,
};
use tus_forge_core::serialize::{greedy_batch, serialize_tables};
use tus_forge_core::synth::{generate_lake, Mapping, SynthConfig};
use tus_forge_core::table::{load_table, strip_metadata};
use tus_forge_core::{DataLake, Error, Exec, Result};

mod config;
use config::RunConfig;

/// Table union search over CSV data lakes, plus a benchmark harness.
#[derive(Parser)]
#[command(name = "tus-forge", version)]
struct Cli {
    /// Key-value run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a lake directory and list its tables.
    Ingest {
        #[arg(long)]
        lake: Option<String>,
        dir: PathBuf,
    },
    /// Replace table and column names with anonymous ids.
    StripMetadata {
        #[arg(long)]
        seed: Option<u64>,
        dir: PathBuf,
        out_dir: PathBuf,
    },
    /// Print the batch manifest for a lake.
    Serialize {
        #[arg(long)]
        lake: Option<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Write the manifest here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        dir: PathBuf,
    },
    /// Embed every table of a lake into an embeddings directory.
    Embed {
        #[arg(long)]
        lake: Option<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
        dir: PathBuf,
    },
    /// Build, inspect or extend a vector store.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Rank indexed tables by unionability with a query table.
    Query {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Restrict results to these lakes (comma separated).
        #[arg(long, value_delimiter = ',')]
        lakes: Option<Vec<String>>,
        /// Scan every vector instead of walking the graph.
        #[arg(long)]
        exact: bool,
        /// Keep the query itself in the results when it is indexed.
        #[arg(long)]
        include_self: bool,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
        #[arg(long)]
        lake: Option<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        query: PathBuf,
    },
    /// Benchmark stages on a standardized corpus.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Generate a synthetic corpus with known ground truth.
    Synth {
        #[arg(long, value_enum, default_value_t = Mode::OneToOne)]
        mode: Mode,
        #[arg(long, default_value_t = 5)]
        domains: usize,
        #[arg(long, default_value_t = 1)]
        tables_per_domain: usize,
        #[arg(long, default_value_t = 3)]
        partitions: usize,
        #[arg(long, default_value_t = 60)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        cols: usize,
        /// Noise tables; defaults to 20% of the target tables.
        #[arg(long)]
        noise: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        overlap: f64,
        /// Columns removed from each target in onto mode; defaults to cols/3.
        #[arg(long)]
        drop_cols: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexAction {
    /// Index embeddings directories and/or lake directories into one store.
    Build {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        embeddings: Vec<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        lakes: Vec<PathBuf>,
    },
    /// Print the store manifest.
    Info {
        #[arg(long)]
        store: PathBuf,
    },
    /// Embed and insert one table without re-indexing.
    Add {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        lake: String,
        #[command(flatten)]
        pipeline: PipelineArgs,
        table: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchAction {
    /// Lay out a raw lake as query/, datalake/ and groundtruth.map, or
    /// validate an existing layout.
    Prepare {
        #[arg(long)]
        lake: PathBuf,
        /// Raw directory holding every table.
        #[arg(long, requires_all = ["queries", "truth"])]
        from: Option<PathBuf>,
        /// Query table ids (comma separated).
        #[arg(long, value_delimiter = ',')]
        queries: Option<Vec<String>>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Execute an approach's steps, resuming where a previous run stopped.
    Run {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long, default_value = "hnsw")]
        approach: String,
        /// Steps to undo and execute again (comma separated).
        #[arg(long, value_delimiter = ',')]
        rerun: Vec<String>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Score an approach's predictions and write experiments.csv.
    Evaluate {
        #[arg(long)]
        lake: PathBuf,
        #[arg(long, default_value = "hnsw")]
        approach: String,
        /// k values (comma separated).
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        ar_mode: Option<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Human,
    Tsv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    OneToOne,
    Onto,
}

/// Flags shared by every command that serializes or embeds tables.
#[derive(Args, Clone, Default)]
struct PipelineArgs {
    /// Rows sampled per table.
    #[arg(long)]
    rows: Option<String>,
    /// Row sampling seed.
    #[arg(long)]
    sample_seed: Option<String>,
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    limit_n: Option<String>,
    #[arg(long)]
    limit_m: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the provider credential.
    #[arg(long)]
    credential_env: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    ef_search: Option<String>,
}

impl PipelineArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("sampler.rows", self.rows.clone()),
            ("sampler.seed", self.sample_seed.clone()),
            ("provider.kind", self.provider.clone()),
            ("provider.model", self.model.clone()),
            ("provider.dim", self.dim.clone()),
            ("provider.limit_n", self.limit_n.clone()),
            ("provider.limit_m", self.limit_m.clone()),
            ("provider.endpoint", self.endpoint.clone()),
            ("provider.credential_env", self.credential_env.clone()),
            ("index.metric", self.metric.clone()),
            ("index.ef_search", self.ef_search.clone()),
        ]
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::from(1)
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.sequential {
        cfg.exec = Exec::Sequential;
    }
    Ok(cfg)
}

fn configured(base: &RunConfig, args: &PipelineArgs) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.apply(args.overrides())?;
    cfg.validate()?;
    Ok(cfg)
}

/// Lake id: explicit name, else the directory name.
fn lake_name(name: Option<&str>, dir: &Path) -> String {
    name.map(str::to_owned)
        .unwrap_or_else(|| CorpusLayout::new(dir).lake_name())
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::Config(format!("stdout: {e}")))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let base = base_config(&cli)?;
    match cli.command {
        Command::Ingest { lake, dir } => {
            let lake = DataLake::load(&dir, &lake_name(lake.as_deref(), &dir), base.exec)?;
            let mut out = String::from("table\trows\tcols\n");
            for t in &lake.tables {
                out.push_str(&format!(
                    "{}\t{}\t{}\n",
                    t.table_ref,
                    t.n_rows(),
                    t.n_cols()
                ));
            }
            write_output(None, &out)
        }
        Command::StripMetadata { seed, dir, out_dir } => {
            let seed = seed.unwrap_or(base.seed);
            let src = CorpusLayout::new(&dir);
            if src.is_prepared() {
                let stripped = strip_corpus(
                    &src.load_queries(base.exec)?,
                    &src.load_datalake(base.exec)?,
                    &src.ground_truth()?,
                    seed,
                )?;
                let out = CorpusLayout::new(&out_dir);
                write_corpus(&out, &stripped.queries, &stripped.datalake, &stripped.truth)?;
                write_file(
                    &out_dir.join("renames.query.tsv"),
                    &stripped.query_renames.to_tsv(),
                )?;
                write_file(
                    &out_dir.join("renames.datalake.tsv"),
                    &stripped.table_renames.to_tsv(),
                )?;
                println!(
                    "stripped {} queries and {} tables into {}",
                    stripped.queries.tables.len(),
                    stripped.datalake.tables.len(),
                    out_dir.display()
                );
            } else {
                let lake = DataLake::load(&dir, &lake_name(None, &dir), base.exec)?;
                let (stripped, renames) = strip_metadata(&lake, seed)?;
                stripped.write(&out_dir)?;
                write_file(&out_dir.join("renames.tsv"), &renames.to_tsv())?;
                println!(
                    "stripped {} tables into {}",
                    stripped.tables.len(),
                    out_dir.display()
                );
            }
            Ok(())
        }
        Command::Serialize {
            lake,
            pipeline,
            out,
            dir,
        } => {
            let cfg = configured(&base, &pipeline)?;
            let lake = DataLake::load(&dir, &lake_name(lake.as_deref(), &dir), cfg.exec)?;
            let provider = cfg.provider.build()?;
            let limits = provider.limits();
            let sers = serialize_tables(
                &lake.tables,
                &cfg.sampler,
                limits.n,
                provider.tokenizer(),
                cfg.exec,
            );
            let plan = greedy_batch(sers, limits.n, limits.m)?;
            write_output(out.as_deref(), &plan.manifest())
        }
        Command::Embed {
            lake,
            pipeline,
            out,
            dir,
        } => {
            let cfg = configured(&base, &pipeline)?;
            let lake = DataLake::load(&dir, &lake_name(lake.as_deref(), &dir), cfg.exec)?;
            let provider = cfg.provider.build()?;
            let records = embed_tables(&lake.tables, &cfg.sampler, provider.as_ref(), cfg.exec)?;
            let mut meta = StoreMeta::new(provider.dimension(), cfg.metric, provider.model_id());
            meta.hnsw = cfg.hnsw;
            meta.config = pipeline_fingerprint(&cfg.sampler, provider.as_ref());
            write_records(&out, &meta, &records)?;
            println!("embedded {} tables into {}", records.len(), out.display());
            Ok(())
        }
        Command::Index { action } => index(&base, action),
        Command::Query {
            store,
            k,
            lakes,
            exact,
            include_self,
            format,
            lake,
            pipeline,
            query,
        } => {
            let cfg = configured(&base, &pipeline)?;
            let provider = cfg.provider.build()?;
            let store = VectorStore::load(&store)?.with_exec(cfg.exec);
            let lake_id = lake.unwrap_or_else(|| "query".into());
            let table = load_table(&query, &lake_id)?;
            let opts = QueryOptions {
                k,
                metric: cfg.metric,
                lakes: lakes.map(|l| l.into_iter().collect()),
                include_self,
                exact,
            };
            let result = query_topk(&table, &store, provider.as_ref(), &cfg.sampler, &opts)?;
            let mut out = String::new();
            match format {
                Format::Tsv => {
                    for (i, n) in result.neighbors.iter().enumerate() {
                        out.push_str(&format!("{}\t{}\t{:.6}\n", i + 1, n.table_ref, n.score));
                    }
                }
                Format::Human => {
                    let width = result
                        .neighbors
                        .iter()
                        .map(|n| n.table_ref.key().len())
                        .max()
                        .unwrap_or(5)
                        .max(5);
                    out.push_str(&format!(
                        "{:>4}  {:<width$}  {:>9}\n",
                        "rank", "table", "score"
                    ));
                    for (i, n) in result.neighbors.iter().enumerate() {
                        out.push_str(&format!(
                            "{:>4}  {:<width$}  {:>9.6}\n",
                            i + 1,
                            n.table_ref.key(),
                            n.score
                        ));
                    }
                    out.push_str(&format!(
                        "{} results in {:.3?}\n",
                        result.neighbors.len(),
                        result.elapsed
                    ));
                }
            }
            write_output(None, &out)
        }
        Command::Bench { action } => bench(&base, action),
        Command::Synth {
            mode,
            domains,
            tables_per_domain,
            partitions,
            rows,
            cols,
            noise,
            overlap,
            drop_cols,
            seed,
            out_dir,
        } => {
            let cfg = SynthConfig {
                mapping: match mode {
                    Mode::OneToOne => Mapping::OneToOne,
                    Mode::Onto => Mapping::Onto,
                },
                n_domains: domains,
                tables_per_domain,
                partitions,
                rows,
                cols,
                n_noise: noise,
                vocab_overlap: overlap,
                onto_drop_cols: drop_cols.unwrap_or(cols / 3),
                seed: seed.unwrap_or(base.seed),
                ..SynthConfig::default()
            };
            let lake = generate_lake(&cfg, base.exec)?;
            lake.write(&CorpusLayout::new(&out_dir))?;
            println!(
                "wrote {} queries and {} lake tables to {}",
                lake.queries.tables.len(),
                lake.datalake.tables.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    write_output(Some(path), text)
}

fn index(base: &RunConfig, action: IndexAction) -> Result<()> {
    match action {
        IndexAction::Build {
            store,
            embeddings,
            pipeline,
            lakes,
        } => {
            if embeddings.is_empty() && lakes.is_empty() {
                return Err(Error::Config(
                    "nothing to index: give --embeddings or lake directories".into(),
                ));
            }
            let cfg = configured(base, &pipeline)?;
            let provider = cfg.provider.build()?;
            let mut meta = StoreMeta::new(provider.dimension(), cfg.metric, provider.model_id());
            meta.hnsw = cfg.hnsw;
            meta.config = pipeline_fingerprint(&cfg.sampler, provider.as_ref());
            let mut vs = VectorStore::new(meta)?.with_exec(cfg.exec);
            for dir in &embeddings {
                let (m, records) = read_store_files(dir)?;
                if m.config != vs.meta().config || m.model_id != vs.meta().model_id {
                    return Err(Error::Config(format!(
                        "{} was embedded with different settings than this build",
                        dir.display()
                    )));
                }
                for r in records {
                    vs.insert(r)?;
                }
            }
            for dir in &lakes {
                let lake = DataLake::load(dir, &lake_name(None, dir), cfg.exec)?;
                for r in embed_tables(&lake.tables, &cfg.sampler, provider.as_ref(), cfg.exec)? {
                    vs.insert(r)?;
                }
            }
            vs.persist(&store)?;
            println!("indexed {} tables into {}", vs.len(), store.display());
            Ok(())
        }
        IndexAction::Info { store } => {
            let manifest = read_manifest(&store)?;
            let out: String = manifest
                .iter()
                .map(|(k, v)| format!("{k}\t{}\n", v.replace('\t', "\\t").replace('\n', "\\n")))
                .collect();
            write_output(None, &out)
        }
        IndexAction::Add {
            store,
            lake,
            pipeline,
            table,
        } => {
            let cfg = configured(base, &pipeline)?;
            let provider = cfg.provider.build()?;
            let mut vs = VectorStore::load(&store)?.with_exec(cfg.exec);
            check_symmetry(&vs, &cfg.sampler, provider.as_ref())?;
            let t = load_table(&table, &lake)?;
            add_table_incremental(&t, &mut vs, provider.as_ref(), &cfg.sampler)?;
            vs.persist(&store)?;
            println!("added {} ({} tables indexed)", t.table_ref, vs.len());
            Ok(())
        }
    }
}

fn settings(cfg: &RunConfig, approach: &str) -> PipelineSettings {
    PipelineSettings {
        sampler: cfg.sampler.clone(),
        provider: cfg.provider.clone(),
        metric: cfg.metric,
        hnsw: cfg.hnsw,
        k_max: cfg.k_grid.iter().copied().max().unwrap_or(64),
        exact: approach == "exact",
        exec: cfg.exec,
    }
}

/// Step plan for `approach`: a `<lake>/approaches/<name>.steps` file when
/// one exists, otherwise one of the built-in pipelines.
fn approach_plan(layout: &CorpusLayout, approach: &str, cfg: &RunConfig) -> Result<StepPlan> {
    let run_dir = layout.run_dir(approach);
    let steps_file = layout
        .root
        .join("approaches")
        .join(format!("{approach}.steps"));
    if steps_file.is_file() {
        fs::create_dir_all(&run_dir)
            .map_err(|e| Error::Config(format!("{}: {e}", run_dir.display())))?;
        let steps = load_command_steps(&steps_file, &layout.root)?;
        return StepPlan::new(steps, run_dir.join(STATUS));
    }
    match approach {
        "hnsw" | "exact" => pipeline_plan(layout, &run_dir, &settings(cfg, approach)),
        other => Err(Error::Config(format!(
            "unknown approach {other:?}: no {} and not a built-in",
            steps_file.display()
        ))),
    }
}

/// Rebuilds `<lake>/<name>` from every run's copy of the same file.
fn aggregate(layout: &CorpusLayout, name: &str, header: &str) -> Result<()> {
    let runs = layout.root.join("runs");
    let mut out = format!("{header}\n");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(|e| Error::Config(format!("{}: {e}", runs.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(name).is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        let text = fs::read_to_string(d.join(name))
            .map_err(|e| Error::Config(format!("{}: {e}", d.display())))?;
        for line in text.lines().skip(1) {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_file(&layout.root.join(name), &out)
}

fn bench(base: &RunConfig, action: BenchAction) -> Result<()> {
    match action {
        BenchAction::Prepare {
            lake,
            from,
            queries,
            truth,
            force,
        } => {
            let layout = CorpusLayout::new(&lake);
            if let (Some(from), Some(queries), Some(truth)) = (from, queries, truth) {
                if prepare_corpus(&from, &queries, &truth, &layout, force)? {
                    println!("prepared {}", lake.display());
                } else {
                    println!(
                        "{} is already prepared; use --force to redo it",
                        lake.display()
                    );
                }
                return Ok(());
            }
            layout.validate()?;
            println!(
                "{}: {} queries, {} lake tables, ground truth valid",
                lake.display(),
                layout.query_ids()?.len(),
                layout.table_ids()?.len()
            );
            Ok(())
        }
        BenchAction::Run {
            lake,
            approach,
            rerun,
            force,
            pipeline,
        } => {
            let cfg = configured(base, &pipeline)?;
            let layout = CorpusLayout::new(&lake);
            layout.validate()?;
            let mut plan = approach_plan(&layout, &approach, &cfg)?;
            let rerun: BTreeSet<String> = if force {
                plan.step_names().into_iter().collect()
            } else {
                rerun.into_iter().collect()
            };
            let outcome = plan.run(&rerun)?;
            for s in &outcome.skipped {
                println!("{s}: done, skipped");
            }
            for s in &outcome.executed {
                let secs = plan.state(s).and_then(|st| st.seconds).unwrap_or(0.0);
                println!("{s}: executed in {secs:.3}s");
            }
            Ok(())
        }
        BenchAction::Evaluate {
            lake,
            approach,
            k,
            ar_mode,
            pipeline,
        } => {
            let mut cfg = configured(base, &pipeline)?;
            cfg.apply([("bench.k", k), ("bench.ar_mode", ar_mode)])?;
            let layout = CorpusLayout::new(&lake);
            layout.validate()?;
            let plan = approach_plan(&layout, &approach, &cfg)?;
            let run_dir = layout.run_dir(&approach);
            let preds = PredictionSet::read(&run_dir.join(PREDICTION))?;
            let lake_name = layout.lake_name();
            let spec = EvalSpec {
                approach: &approach,
                lake: &lake_name,
                k_grid: &cfg.k_grid,
                ar_mode: cfg.ar_mode,
            };
            let report: EvalReport = evaluate(
                &preds,
                &layout.ground_truth()?,
                &layout.query_ids()?,
                &spec,
                &plan.timings(),
                cfg.exec,
            )?;
            report.write(&run_dir)?;
            aggregate(&layout, EXPERIMENTS, EXPERIMENTS_HEADER)?;
            aggregate(&layout, TIMINGS, TIMINGS_HEADER)?;
            write_output(None, &report.experiments_csv())
        }
    }
}
