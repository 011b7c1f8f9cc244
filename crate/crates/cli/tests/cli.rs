use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tus-forge"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tus(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn synth_run_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth",
            "--mode",
            "one-to-one",
            "--domains",
            "5",
            "--partitions",
            "3",
            "--noise",
            "2",
            "--overlap",
            "0.0",
            "--seed",
            "1",
            "lake",
        ],
    );
    ok(d, &["bench", "prepare", "--lake", "lake"]);
    let first = ok(d, &["bench", "run", "--lake", "lake", "--approach", "hnsw"]);
    assert!(first.contains("query: executed"));
    let second = ok(d, &["bench", "run", "--lake", "lake", "--approach", "hnsw"]);
    assert!(second.contains("query: done, skipped"));
    let rerun = ok(d, &["bench", "run", "--lake", "lake", "--rerun", "query"]);
    assert!(rerun.contains("query: executed") && rerun.contains("index: done, skipped"));
    ok(
        d,
        &[
            "bench",
            "evaluate",
            "--lake",
            "lake",
            "--approach",
            "hnsw",
            "--k",
            "1,2,4,8,16,32,64",
        ],
    );
    let exp = fs::read_to_string(d.join("lake/experiments.csv")).unwrap();
    let lines: Vec<&str> = exp.lines().collect();
    assert_eq!(lines[0], "approach,datalake,k,map,ar,excluded_queries");
    assert_eq!(lines.len(), 8);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(3) == Some("1")));
    let timings = fs::read_to_string(d.join("lake/timings.csv")).unwrap();
    assert!(timings.starts_with("approach,datalake,step,phase,seconds\n"));
    assert!(timings.contains(",query,online,") && timings.contains(",embed,offline,"));
}

#[test]
fn evaluate_aggregates_approaches_and_stripped_lake_matches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "2", "lake"]);
    for approach in ["hnsw", "exact"] {
        ok(
            d,
            &["bench", "run", "--lake", "lake", "--approach", approach],
        );
        ok(
            d,
            &[
                "bench",
                "evaluate",
                "--lake",
                "lake",
                "--approach",
                approach,
            ],
        );
    }
    let exp = fs::read_to_string(d.join("lake/experiments.csv")).unwrap();
    assert_eq!(exp.lines().count(), 1 + 2 * 7);

    ok(d, &["strip-metadata", "--seed", "9", "lake", "stripped"]);
    assert!(d.join("stripped/renames.datalake.tsv").is_file());
    ok(d, &["bench", "run", "--lake", "stripped"]);
    let stripped = ok(d, &["bench", "evaluate", "--lake", "stripped"]);
    let maps = |text: &str| -> Vec<String> {
        text.lines()
            .skip(1)
            .filter(|l| l.starts_with("hnsw,"))
            .map(|l| l.split(',').skip(2).take(2).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(maps(&stripped), maps(&exp)[..7]);
}

#[test]
fn command_step_approach() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "3", "lake"]);
    fs::create_dir_all(d.join("lake/approaches")).unwrap();
    // Predicts each query's ground truth verbatim.
    fs::write(
        d.join("lake/approaches/oracle.steps"),
        "# name\tphase\texecute\tundo\n\
         query\tonline\tawk -F'\\t' '{n[$1]++; print $1 \"\\t\" n[$1] \"\\t\" $2}' groundtruth.map > runs/oracle/prediction.map\trm -f runs/oracle/prediction.map\n",
    )
    .unwrap();
    ok(
        d,
        &["bench", "run", "--lake", "lake", "--approach", "oracle"],
    );
    let out = ok(
        d,
        &[
            "bench",
            "evaluate",
            "--lake",
            "lake",
            "--approach",
            "oracle",
            "--k",
            "1,2",
        ],
    );
    assert!(out.contains("oracle,lake,1,1,0.5,0"));
    assert!(out.contains("oracle,lake,2,1,1,0"));

    fs::write(
        d.join("lake/approaches/broken.steps"),
        "query\tonline\texit 3\t\n",
    )
    .unwrap();
    let failed = tus(
        d,
        &["bench", "run", "--lake", "lake", "--approach", "broken"],
    );
    assert_eq!(failed.status.code(), Some(1));
    assert!(stderr(&failed).starts_with("error[E_STEP_FAILED]"));
}

#[test]
fn index_query_and_symmetry_guard() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "4", "lake"]);
    fs::write(d.join("run.conf"), "sampler.rows = 8\nprovider.dim = 64\n").unwrap();
    ok(
        d,
        &[
            "--config",
            "run.conf",
            "index",
            "build",
            "--store",
            "store",
            "lake/datalake",
        ],
    );
    let info = ok(d, &["index", "info", "--store", "store"]);
    assert!(info.contains("config.sampler.rows\t8") && info.contains("dimension\t64"));

    let q = "lake/query/d000_t000_p0.csv";
    let mismatch = tus(d, &["query", "--store", "store", q]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(stderr(&mismatch).starts_with("error[E_CONFIG]"));

    let tsv = ok(
        d,
        &[
            "--config", "run.conf", "query", "--store", "store", "--k", "2", "--format", "tsv", q,
        ],
    );
    let ranked: Vec<&str> = tsv.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    let mut siblings = ranked.clone();
    siblings.sort();
    assert_eq!(siblings, ["datalake/d000_t000_p1", "datalake/d000_t000_p2"]);

    ok(
        d,
        &[
            "--config", "run.conf", "index", "add", "--store", "store", "--lake", "extra", q,
        ],
    );
    let with_self = ok(
        d,
        &[
            "--config",
            "run.conf",
            "query",
            "--store",
            "store",
            "--k",
            "1",
            "--format",
            "tsv",
            "--lake",
            "extra",
            "--include-self",
            q,
        ],
    );
    assert!(with_self.starts_with("1\textra/d000_t000_p0\t1.000000"));
    let filtered = ok(
        d,
        &[
            "--config", "run.conf", "query", "--store", "store", "--k", "3", "--format", "tsv",
            "--lakes", "extra", q,
        ],
    );
    assert!(filtered.lines().all(|l| l.contains("\textra/")));

    let dup = tus(
        d,
        &[
            "--config", "run.conf", "index", "add", "--store", "store", "--lake", "extra", q,
        ],
    );
    assert!(stderr(&dup).starts_with("error[E_DUPLICATE]"));
}

#[test]
fn embed_then_index_and_serialize_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "5", "lake"]);
    ok(
        d,
        &["embed", "--lake", "a", "--out", "emb", "lake/datalake"],
    );
    ok(
        d,
        &["index", "build", "--store", "store", "--embeddings", "emb"],
    );
    assert!(ok(d, &["index", "info", "--store", "store"]).contains("count\t12"));
    let other = tus(
        d,
        &[
            "index",
            "build",
            "--store",
            "store2",
            "--embeddings",
            "emb",
            "--rows",
            "4",
        ],
    );
    assert!(stderr(&other).starts_with("error[E_CONFIG]"));

    let manifest = ok(
        d,
        &[
            "serialize",
            "--limit-n",
            "40",
            "--limit-m",
            "100",
            "lake/datalake",
        ],
    );
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("table\ttokens\tbatch"));
    let mut sums = std::collections::BTreeMap::<usize, usize>::new();
    for l in lines {
        let f: Vec<&str> = l.split('\t').collect();
        let tokens: usize = f[1].parse().unwrap();
        assert!(tokens <= 40);
        *sums.entry(f[2].parse().unwrap()).or_default() += tokens;
    }
    assert!(sums.values().all(|&s| s <= 100));
    let bad = tus(
        d,
        &[
            "serialize",
            "--limit-n",
            "100",
            "--limit-m",
            "40",
            "lake/datalake",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn ingest_and_prepare_from_raw() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir_all(d.join("raw")).unwrap();
    fs::write(d.join("raw/q.csv"), "city,zip\nKassel,34117\nFulda,36037\n").unwrap();
    fs::write(d.join("raw/a.csv"), "city,zip\nErfurt,99084\nJena,07743\n").unwrap();
    fs::write(d.join("raw/b.csv"), "street,zip\nMain,80331\n").unwrap();
    fs::write(d.join("truth.map"), "q\ta\n").unwrap();
    let listing = ok(d, &["ingest", "--lake", "raw", "raw"]);
    assert!(listing.contains("raw/a\t2\t2"));
    ok(
        d,
        &[
            "bench",
            "prepare",
            "--lake",
            "prepared",
            "--from",
            "raw",
            "--queries",
            "q",
            "--truth",
            "truth.map",
        ],
    );
    assert!(d.join("prepared/query/q.csv").is_file());
    assert!(d.join("prepared/datalake/b.csv").is_file());
    let again = ok(
        d,
        &[
            "bench",
            "prepare",
            "--lake",
            "prepared",
            "--from",
            "raw",
            "--queries",
            "q",
            "--truth",
            "truth.map",
        ],
    );
    assert!(again.contains("already prepared"));
    ok(
        d,
        &[
            "bench",
            "prepare",
            "--lake",
            "prepared",
            "--from",
            "raw",
            "--queries",
            "q",
            "--truth",
            "truth.map",
            "--force",
        ],
    );

    fs::write(d.join("bad.map"), "q\tmissing\n").unwrap();
    let bad = tus(
        d,
        &[
            "bench",
            "prepare",
            "--lake",
            "p2",
            "--from",
            "raw",
            "--queries",
            "q",
            "--truth",
            "bad.map",
        ],
    );
    assert!(stderr(&bad).starts_with("error[E_CORPUS]"));
}

#[test]
fn exit_codes_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = tus(d, &["query", "--store", "nowhere", "q.csv"]);
    assert_eq!(missing.status.code(), Some(1));
    let err = stderr(&missing);
    assert!(err.starts_with("error[E_STORE_NOT_FOUND]"));
    assert_eq!(err.lines().count(), 1);

    assert_eq!(tus(d, &["query", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(tus(d, &["frobnicate"]).status.code(), Some(2));
    let bad_cfg = tus(d, &["synth", "--partitions", "1", "out"]);
    assert!(stderr(&bad_cfg).starts_with("error[E_CONFIG]"));

    let subcommands: &[&[&str]] = &[
        &[],
        &["ingest"],
        &["strip-metadata"],
        &["serialize"],
        &["embed"],
        &["index"],
        &["index", "build"],
        &["index", "info"],
        &["index", "add"],
        &["query"],
        &["bench"],
        &["bench", "prepare"],
        &["bench", "run"],
        &["bench", "evaluate"],
        &["synth"],
    ];
    for sub in subcommands {
        let mut args = sub.to_vec();
        args.push("--help");
        let out = tus(d, &args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}
