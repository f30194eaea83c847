//! The `hydro` command line: dataset validation, distillation, evaluation
//! and walk analysis.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 ingestion
//! error (unreadable dataset or artifact, mismatched dimensions), 4
//! divergence during distillation, 1 anything else.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hydro_core::distill::{self, DistillConfig};
use hydro_core::eval::{self, EvalResult, Task, TrainSource};
use hydro_core::gnn::GcnConfig;
use hydro_core::graphcore::io::load_dataset;
use hydro_core::graphcore::{CondensedGraph, Graph};
use hydro_core::spectral;
use hydro_core::HydroError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INGEST: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// An error that carries its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn fail(code: i32, message: impl Into<String>) -> anyhow::Error {
    CliError {
        code,
        message: message.into(),
    }
    .into()
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return e.code;
    }
    match err.downcast_ref::<HydroError>() {
        Some(HydroError::Ingestion { .. }) | Some(HydroError::Json(_)) => EXIT_INGEST,
        Some(HydroError::Divergence { .. }) => EXIT_DIVERGED,
        Some(HydroError::Contract(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

#[derive(Parser, Debug)]
#[command(name = "hydro", version, about = "Hyperbolic graph condensation")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load a dataset directory and print its summary.
    Validate {
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Condense a dataset into condensed.json plus a run log.
    Distill(DistillArgs),
    /// Train GCNs on a condensed graph and score them on the dataset.
    Eval(EvalArgs),
    /// Export commute, flow-distance or walk-diagnostic data.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug, Default)]
pub struct DistillArgs {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub outer: Option<usize>,
    #[arg(long)]
    pub inner: Option<usize>,
    #[arg(long)]
    pub lr_feat: Option<f64>,
    #[arg(long)]
    pub lr_struct: Option<f64>,
    #[arg(long)]
    pub lr_model: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gap_weight: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub curvature: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub sgc_hops: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub probe_every: Option<usize>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Source {
    /// The graph in --condensed.
    Condensed,
    /// The dataset itself with its training split.
    Whole,
    /// Randomly selected training nodes, --ratio of the dataset.
    Random,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory the models are scored on.
    #[arg(long)]
    pub dataset: PathBuf,
    /// condensed.json written by `hydro distill`.
    #[arg(long)]
    pub condensed: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "condensed")]
    pub source: Source,
    /// Budget ratio for `--source random`.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Comma-separated tasks: nc, lp.
    #[arg(long, default_value = "nc", value_delimiter = ',')]
    pub task: Vec<String>,
    /// Training runs per task.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Seed of the first run; run k uses seed + k.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where results.json goes; defaults to the condensed file's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run configuration the condensed graph must have been produced with;
    /// defaults to config.toml next to the condensed file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluate even when the configuration hash does not match.
    #[arg(long)]
    pub force: bool,
    /// Parallel evaluation runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = 500)]
    pub gcn_epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub gcn_hidden: usize,
    #[arg(long, default_value_t = 0.01)]
    pub gcn_lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub gcn_weight_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gcn_dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Commute,
    Flow,
    Diagnostics,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Dataset directory to analyze.
    #[arg(long, conflicts_with = "condensed")]
    pub graph: Option<PathBuf>,
    /// Condensed graph to analyze.
    #[arg(long)]
    pub condensed: Option<PathBuf>,
    /// What to export.
    #[arg(long, value_enum, default_value = "commute")]
    pub metric: Metric,
    /// Commute times above this value are clipped.
    #[arg(long, default_value_t = spectral::DEFAULT_COMMUTE_CAP)]
    pub cap: f64,
    /// Output directory.
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
    /// Condensed graph whose commute times are scored against --graph.
    #[arg(long, requires = "graph")]
    pub compare: Option<PathBuf>,
    /// Start node of the total-variation curve.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Length of the total-variation curve; defaults to 50 mixing times.
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Everything that determines a distillation artifact. The output
/// directory is deliberately absent so that reruns elsewhere hash equally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    #[serde(default)]
    pub distill: DistillConfig,
}

impl RunConfig {
    pub fn canonical(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> anyhow::Result<String> {
        Ok(sha256_hex(self.canonical()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn normalize_path(p: &Path) -> String {
    let s = p.to_string_lossy().to_string();
    let trimmed = s.trim_end_matches('/');
    if trimmed.is_empty() {
        s
    } else {
        trimmed.to_string()
    }
}

fn read_run_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        fail(
            EXIT_CONFIG,
            format!("cannot read config {}: {e}", path.display()),
        )
    })?;
    toml::from_str(&text).map_err(|e| {
        fail(
            EXIT_CONFIG,
            format!("invalid config {}: {e}", path.display()),
        )
    })
}

/// Resolves file values and flag overrides into one configuration.
pub fn resolve_run_config(args: &DistillArgs) -> anyhow::Result<RunConfig> {
    let mut rc = match &args.config {
        Some(p) => read_run_config(p)?,
        None => RunConfig {
            dataset: String::new(),
            distill: DistillConfig::default(),
        },
    };
    if let Some(d) = &args.dataset {
        rc.dataset = normalize_path(d);
    }
    if rc.dataset.is_empty() {
        return Err(fail(
            EXIT_CONFIG,
            "--dataset is required (flag or config file)",
        ));
    }
    let d = &mut rc.distill;
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = args.$field { d.$field = v; } )* };
    }
    apply!(
        ratio,
        epochs,
        outer,
        inner,
        lr_feat,
        lr_struct,
        lr_model,
        beta,
        gap_weight,
        momentum,
        curvature,
        weight_decay,
        sample_size,
        sgc_hops,
        hidden,
        layers,
        probe_every,
        probe_epochs,
        seed
    );
    d.validate().map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .trim_start_matches("contract violation: ")
            .split(':')
            .next()
            .unwrap_or("")
            .replace('_', "-");
        fail(EXIT_CONFIG, format!("invalid value for --{field}: {msg}"))
    })?;
    Ok(rc)
}

fn load(dir: &Path) -> anyhow::Result<Graph> {
    load_dataset(dir).map_err(|e| fail(EXIT_INGEST, e.to_string()))
}

fn load_condensed(path: &Path) -> anyhow::Result<CondensedGraph> {
    CondensedGraph::load(path).map_err(|e| fail(EXIT_INGEST, e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_validate(dataset: &Path) -> anyhow::Result<()> {
    let g = load(dataset)?;
    let comps = g.components();
    let largest = comps.iter().map(Vec::len).max().unwrap_or(0);
    println!("nodes: {}", g.n());
    println!("edges: {}", g.num_edges());
    println!("features: {}", g.num_features());
    println!("classes: {}", g.num_classes());
    let s = g.splits();
    println!(
        "splits: train {} / val {} / test {}",
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    println!("components: {} (largest {largest})", comps.len());
    for flag in g.flags() {
        println!("flag: {flag:?}");
    }
    Ok(())
}

fn cmd_distill(args: &DistillArgs) -> anyhow::Result<()> {
    let rc = resolve_run_config(args)?;
    let hash = rc.hash()?;
    let g = load(Path::new(&rc.dataset))?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut config_text = format!("# config_hash = \"{hash}\"\n");
    config_text.push_str(&rc.canonical()?);
    write_file(&args.out.join("config.toml"), config_text.as_bytes())?;

    let log_path = args.out.join("run_log.jsonl");
    let mut log_file = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(log_file, "{}", serde_json::json!({ "config_hash": hash }))?;
    let result = distill::distill(&g, &rc.distill, &hash, &mut |rec| {
        let line = serde_json::to_string(rec).map_err(HydroError::from)?;
        writeln!(log_file, "{line}")?;
        log::info!(
            "epoch {} L_total {:.4} g_syn {:.5} g_sub {:.5}",
            rec.epoch,
            rec.l_total,
            rec.g_syn,
            rec.g_sub
        );
        Ok(())
    });
    log_file.flush()?;
    match result {
        Ok(outcome) => {
            let bytes = outcome.condensed.to_json_bytes()?;
            write_file(&args.out.join("condensed.json"), &bytes)?;
            println!(
                "condensed {} nodes into {} (probe-selected epoch {}), config_hash {hash}",
                g.n(),
                outcome.condensed.n(),
                outcome.best_epoch
            );
            Ok(())
        }
        Err(HydroError::Divergence { epoch, last_good }) => {
            let path = args.out.join("last_good.json");
            write_file(&path, &last_good.to_json_bytes()?)?;
            Err(fail(
                EXIT_DIVERGED,
                format!(
                    "distillation diverged at epoch {epoch}; last good graph written to {}",
                    path.display()
                ),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn parse_tasks(raw: &[String]) -> anyhow::Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for t in raw {
        let task = match t.trim() {
            "nc" => Task::Nc,
            "lp" => Task::Lp,
            other => {
                return Err(fail(
                    EXIT_CONFIG,
                    format!("invalid value for --task: unknown task `{other}`"),
                ))
            }
        };
        if !tasks.contains(&task) {
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// Worker count for `--jobs`, capped by `HYDRO_THREADS` when set.
pub fn worker_threads(jobs: usize) -> anyhow::Result<usize> {
    let mut n = jobs.max(1);
    if let Ok(v) = std::env::var("HYDRO_THREADS") {
        let cap: usize = v.parse().map_err(|_| {
            fail(
                EXIT_CONFIG,
                format!("HYDRO_THREADS must be a positive integer, got `{v}`"),
            )
        })?;
        n = n.min(cap.max(1));
    }
    Ok(n)
}

fn eval_hash_check(
    args: &EvalArgs,
    cg: &CondensedGraph,
    condensed_path: &Path,
) -> anyhow::Result<()> {
    let config_path = match &args.config {
        Some(p) => Some(p.clone()),
        None => {
            let beside = condensed_path
                .parent()
                .unwrap_or(Path::new("."))
                .join("config.toml");
            beside.exists().then_some(beside)
        }
    };
    let Some(config_path) = config_path else {
        log::warn!("no run configuration found next to the condensed graph; hash not checked");
        return Ok(());
    };
    let expected = read_run_config(&config_path)?.hash()?;
    if expected != cg.config_hash {
        if args.force {
            log::warn!("config hash mismatch ignored (--force)");
        } else {
            return Err(fail(
                EXIT_CONFIG,
                format!(
                    "condensed graph hash {} does not match {} ({expected}); pass --force to evaluate anyway",
                    cg.config_hash,
                    config_path.display()
                ),
            ));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    dataset: String,
    source: &'a str,
    ratio: Option<f64>,
    gcn_epochs: usize,
    gcn_hidden: usize,
    gcn_lr: f64,
    gcn_weight_decay: f64,
    gcn_dropout: f64,
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let tasks = parse_tasks(&args.task)?;
    if args.runs == 0 {
        return Err(fail(
            EXIT_CONFIG,
            "invalid value for --runs: must be at least 1",
        ));
    }
    let gcn = GcnConfig {
        hidden: args.gcn_hidden,
        epochs: args.gcn_epochs,
        lr: args.gcn_lr,
        weight_decay: args.gcn_weight_decay,
        dropout: args.gcn_dropout,
    };
    let g = load(&args.dataset)?;
    let condensed = match args.source {
        Source::Condensed => {
            let path = args.condensed.as_ref().ok_or_else(|| {
                fail(
                    EXIT_CONFIG,
                    "--condensed is required with --source condensed",
                )
            })?;
            let cg = load_condensed(path)?;
            eval_hash_check(args, &cg, path)?;
            if cg.features.ncols() != g.num_features() {
                return Err(fail(
                    EXIT_INGEST,
                    format!(
                        "condensed features have {} columns but the dataset has {}",
                        cg.features.ncols(),
                        g.num_features()
                    ),
                ));
            }
            Some(cg)
        }
        _ => None,
    };
    let ratio = match args.source {
        Source::Random => {
            let r = args
                .ratio
                .ok_or_else(|| fail(EXIT_CONFIG, "--ratio is required with --source random"))?;
            if !(r > 0.0 && r <= 1.0) {
                return Err(fail(
                    EXIT_CONFIG,
                    format!("invalid value for --ratio: {r} is outside (0, 1]"),
                ));
            }
            Some(r)
        }
        _ => None,
    };
    let hash = match &condensed {
        Some(cg) => cg.config_hash.clone(),
        None => {
            let settings = EvalSettings {
                dataset: normalize_path(&args.dataset),
                source: if ratio.is_some() { "random" } else { "whole" },
                ratio,
                gcn_epochs: gcn.epochs,
                gcn_hidden: gcn.hidden,
                gcn_lr: gcn.lr,
                gcn_weight_decay: gcn.weight_decay,
                gcn_dropout: gcn.dropout,
            };
            sha256_hex(toml::to_string(&settings)?.as_bytes())
        }
    };

    let seeds: Vec<u64> = (0..args.runs as u64).map(|k| args.seed + k).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads(args.jobs)?)
        .build()?;
    let one_run = |task: Task, seed: u64| -> hydro_core::Result<f64> {
        let baseline;
        let src = match (&condensed, ratio) {
            (Some(cg), _) => TrainSource::Condensed(cg),
            (None, Some(r)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                baseline = eval::baseline_random(&g, r, &mut rng)?;
                match &baseline {
                    Some(cg) => TrainSource::Condensed(cg),
                    None => TrainSource::Whole,
                }
            }
            (None, None) => TrainSource::Whole,
        };
        match task {
            Task::Nc => eval::nc_run(src, &g, &gcn, seed),
            Task::Lp => eval::lp_run(src, &g, &gcn, seed),
        }
    };
    let mut results = Vec::new();
    for task in tasks {
        let accs: Vec<f64> = pool
            .install(|| {
                seeds
                    .par_iter()
                    .map(|&s| one_run(task, s))
                    .collect::<hydro_core::Result<Vec<_>>>()
            })
            .map_err(|e| match e {
                HydroError::Shape(m) => fail(EXIT_INGEST, m),
                HydroError::Contract(m) => fail(EXIT_CONFIG, m),
                other => other.into(),
            })?;
        let r = EvalResult::from_runs(task, seeds.clone(), accs, &hash)?;
        println!(
            "{}: {:.4} ± {:.4} over {} runs",
            r.task, r.mean, r.std, r.runs
        );
        results.push(r);
    }
    let out = match (&args.out, &args.condensed, args.source) {
        (Some(p), _, _) => p.clone(),
        (None, Some(c), Source::Condensed) => {
            c.parent().unwrap_or(Path::new(".")).join("results.json")
        }
        _ => PathBuf::from("results.json"),
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    eval::write_results(&out, &results)?;
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeSettings {
    input: String,
    metric: Metric,
    cap: f64,
    start: usize,
    steps: Option<usize>,
}

fn cmd_analyze(args: &AnalyzeArgs) -> anyhow::Result<()> {
    if !(args.cap > 0.0) {
        return Err(fail(
            EXIT_CONFIG,
            format!("invalid value for --cap: {} must be positive", args.cap),
        ));
    }
    let (g, input, hash) = match (&args.graph, &args.condensed) {
        (Some(dir), None) => {
            let g = load(dir)?;
            (g, normalize_path(dir), None)
        }
        (None, Some(path)) => {
            let cg = load_condensed(path)?;
            let classes = cg.labels.iter().max().map_or(1, |m| m + 1);
            (
                cg.to_graph(classes)?,
                normalize_path(path),
                Some(cg.config_hash.clone()),
            )
        }
        _ => {
            return Err(fail(
                EXIT_CONFIG,
                "exactly one of --graph or --condensed is required",
            ))
        }
    };
    let hash = match hash {
        Some(h) => h,
        None => {
            let settings = AnalyzeSettings {
                input,
                metric: args.metric,
                cap: args.cap,
                start: args.start,
                steps: args.steps,
            };
            sha256_hex(toml::to_string(&settings)?.as_bytes())
        }
    };
    let header = vec![format!("config_hash={hash}")];
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    match args.metric {
        Metric::Commute => {
            let path = args.out.join("commute.csv");
            let m = spectral::commute_heatmap_export(&g, args.cap, &path, &header)?;
            println!(
                "commute: {}×{} matrix (cap {}) written to {}",
                m.nrows(),
                m.ncols(),
                args.cap,
                path.display()
            );
        }
        Metric::Flow => {
            let path = args.out.join("flow.csv");
            let m = spectral::flow_distance(&g)?;
            spectral::write_matrix_csv(&path, &m, &header)?;
            println!(
                "flow: {}×{} matrix written to {}",
                m.nrows(),
                m.ncols(),
                path.display()
            );
        }
        Metric::Diagnostics => diagnostics(&g, args, &header)?,
    }

    if let Some(cpath) = &args.compare {
        let cg = load_condensed(cpath)?;
        if cg.features.ncols() != g.num_features() {
            return Err(fail(
                EXIT_INGEST,
                "compared graphs have different feature widths",
            ));
        }
        let cmp = eval::compare_commute(&cg, &g, args.cap)?;
        spectral::write_matrix_csv(
            args.out.join("commute_condensed.csv"),
            &cmp.condensed,
            &header,
        )?;
        spectral::write_matrix_csv(
            args.out.join("commute_original.csv"),
            &cmp.original,
            &header,
        )?;
        let doc = serde_json::json!({ "score": cmp.score, "cap": args.cap, "config_hash": hash });
        write_file(
            &args.out.join("compare.json"),
            format!("{doc}\n").as_bytes(),
        )?;
        println!("commute comparison score: {:.6}", cmp.score);
    }
    Ok(())
}

fn diagnostics(g: &Graph, args: &AnalyzeArgs, header: &[String]) -> anyhow::Result<()> {
    let comps = g.components();
    let (graph, nodes) = if comps.len() == 1 {
        (g.clone(), (0..g.n()).collect::<Vec<_>>())
    } else {
        let largest = comps
            .iter()
            .max_by_key(|c| c.len())
            .expect("nonempty")
            .clone();
        println!(
            "graph has {} components; diagnostics use the largest ({} nodes)",
            comps.len(),
            largest.len()
        );
        (g.induced(&largest)?, largest)
    };
    let start = nodes.iter().position(|&u| u == args.start).ok_or_else(|| {
        fail(
            EXIT_CONFIG,
            format!(
                "invalid value for --start: node {} is not in the analyzed component",
                args.start
            ),
        )
    })?;
    let d = spectral::walk_diagnostics(&graph, start, args.steps)?;
    println!("gap: {}", d.gap);
    println!("lambda2: {}", d.lambda2);
    println!("nu2: {}", d.nu2);
    println!("mixing estimate: {}", d.mixing_estimate);
    println!("cheeger bounds: [{}, {}]", d.cheeger_lower, d.cheeger_upper);
    let deg = graph.degrees();
    let vol: f64 = deg.iter().sum();
    if let Some((far, &dmin)) = deg
        .iter()
        .enumerate()
        .filter(|&(v, _)| v != start)
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
    {
        let tau = 2.0 / ((deg[start] / vol) * (dmin / vol)) / d.gap;
        println!("tau({}, {}): {}", nodes[start], nodes[far], tau);
    }
    let mut csv = String::new();
    for h in header {
        csv.push_str(&format!("# {h}\n"));
    }
    csv.push_str("t,tv\n");
    for (t, v) in d.tv_curve.iter().enumerate() {
        csv.push_str(&format!("{t},{}\n", hydro_core::fmtutil::f64_17(*v)));
    }
    write_file(&args.out.join("tv_curve.csv"), csv.as_bytes())?;
    let doc = serde_json::json!({
        "gap": d.gap,
        "lambda2": d.lambda2,
        "nu2": d.nu2,
        "mixing_estimate": d.mixing_estimate,
        "cheeger_lower": d.cheeger_lower,
        "cheeger_upper": d.cheeger_upper,
        "config_hash": header[0].trim_start_matches("config_hash="),
    });
    write_file(
        &args.out.join("diagnostics.json"),
        format!("{doc}\n").as_bytes(),
    )?;
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    let result = match &cli.command {
        Command::Validate { dataset } => cmd_validate(dataset),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
