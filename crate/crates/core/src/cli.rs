//! Command-line surface: `gen`, `plan`, `run`, `compare`.

use crate::baselines::ComparisonRow;
use crate::executor::{execute_with, RunReport};
use crate::inference::{InferenceCache, Phase};
use crate::planner::{plan_with_cache, Plan, PlanError};
use crate::query::{self, Query, QueryError};
use crate::synthgen::{self, Preset, SpecError};
use crate::systems::{self, ConfigError, RunConfig, System, SystemError};
use crate::trace::{load_trace, write_trace, TraceError, TraceStore};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeSet;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CONFIG_ENV: &str = "EPPLAN_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "epplan",
    version,
    about = "Plan and simulate early-exit video analytics queries"
)]
pub struct Cli {
    /// Seed for generation and estimator training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trace for one of the benchmark queries.
    Gen(GenArgs),
    /// Plan a query and write the plan.
    Plan(PlanArgs),
    /// Run one system and write its report.
    Run(RunArgs),
    /// Run several systems on the same trace and query.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// q1..q4, or frequent_easy / frequent_hard / rare_hard.
    #[arg(long)]
    pub regime: Preset,
    #[arg(long, default_value_t = synthgen::DEFAULT_FRAME_COUNT)]
    pub frames: u32,
    /// Manifest path; the frames file is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Trace manifest.
    #[arg(long)]
    pub trace: PathBuf,
    /// Query text, or a file whose first query is used.
    #[arg(long)]
    pub query: String,
    /// Config override, repeatable.
    #[arg(long = "config", value_name = "KEY=VALUE")]
    pub config: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: QueryArgs,
    /// thia, thia_ei or thia_single.
    #[arg(long, default_value = "thia_ei")]
    pub system: System,
    /// Plan output; stdout when absent.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: QueryArgs,
    #[arg(long, default_value = "thia")]
    pub system: System,
    /// Execute this plan file instead of planning.
    #[arg(long, conflicts_with = "system")]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: QueryArgs,
    /// Systems to run, comma separated or repeated; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub system: Vec<System>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Per-chunk execution cost series as CSV.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{source_name}: {source}")]
    ConfigFile {
        source_name: String,
        #[source]
        source: ConfigError,
    },
    #[error("query: {0}")]
    Query(#[from] QueryError),
    #[error("query file {path}, line {line}: {source}")]
    QueryFile {
        path: String,
        line: usize,
        #[source]
        source: QueryError,
    },
    #[error("query file {0} holds no query")]
    NoQuery(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("output path {0} is given more than once")]
    ConflictingOutputs(String),
    #[error("{0} does not produce a fine-grained plan")]
    NotAPlanner(System),
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Defaults from the file named by `EPPLAN_CONFIG`, then `--seed`, then the
/// `--config` overrides in order.
pub fn effective_config(
    env_file: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = env_file {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        config
            .apply_lines(&text)
            .map_err(|source| CliError::ConfigFile {
                source_name: path.display().to_string(),
                source,
            })?;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    for pair in overrides {
        config.set_pair(pair)?;
    }
    Ok(config)
}

/// Query text, or the first query in the named file.
pub fn resolve_query(arg: &str) -> Result<Query, CliError> {
    let path = Path::new(arg);
    if !arg.trim_start().to_ascii_lowercase().starts_with("select") && path.is_file() {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let queries = query::parse_batch(&text).map_err(|(line, source)| CliError::QueryFile {
            path: arg.to_string(),
            line,
            source,
        })?;
        return queries
            .into_iter()
            .next()
            .ok_or_else(|| CliError::NoQuery(arg.to_string()));
    }
    Ok(query::parse(arg)?)
}

fn distinct_outputs(paths: &[Option<&PathBuf>]) -> Result<(), CliError> {
    let mut seen = BTreeSet::new();
    for p in paths.iter().flatten() {
        let key = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        if !seen.insert(key) {
            return Err(CliError::ConflictingOutputs(p.display().to_string()));
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    match path {
        Some(p) => crate::atomic_write(p, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(io::Error::other)?;
            w.write_all(b"\n")
        })
        .map_err(io_error(p)),
        None => {
            let text = serde_json::to_string_pretty(value).expect("reports serialize");
            println!("{text}");
            Ok(())
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    crate::atomic_write(path, |w| {
        let mut out = csv::Writer::from_writer(&mut *w);
        for r in rows {
            out.serialize(r).map_err(io::Error::other)?;
        }
        out.flush()
    })
    .map_err(io_error(path))
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    trace: &'a str,
    query: &'a str,
    system: &'a str,
    opt_cost: f64,
    exec_cost: f64,
    total_cost: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    speedup_vs_naive: f64,
    inference_calls: u64,
}

fn csv_rows(reports: &[RunReport]) -> Vec<CsvRow<'_>> {
    reports
        .iter()
        .map(|r| CsvRow {
            trace: &r.trace,
            query: &r.query,
            system: &r.system,
            opt_cost: r.opt_cost,
            exec_cost: r.exec_cost,
            total_cost: r.total_cost,
            precision: r.metrics.precision,
            recall: r.metrics.recall,
            f1: r.metrics.f1,
            speedup_vs_naive: r.speedup_vs_naive,
            inference_calls: r.inference_calls,
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct SeriesRow<'a> {
    system: &'a str,
    start: u32,
    end: u32,
    action: String,
    cost: f64,
}

struct Loaded {
    store: TraceStore,
    query: Query,
    config: RunConfig,
}

fn load(
    common: &QueryArgs,
    seed: Option<u64>,
    env_file: Option<&Path>,
) -> Result<Loaded, CliError> {
    let config = effective_config(env_file, seed, &common.config)?;
    let store = load_trace(&common.trace)?;
    let query = resolve_query(&common.query)?;
    Ok(Loaded {
        store,
        query,
        config,
    })
}

fn cmd_gen(args: &GenArgs, seed: u64, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = args.regime.spec(args.frames, seed);
    let store = synthgen::generate(&spec)?;
    write_trace(&store, &args.out)?;
    let query = args.regime.query();
    let census = synthgen::census(&store, &query);
    writeln!(
        out,
        "{}: {} frames, {} positive ({:.4}) for {}",
        args.out.display(),
        census.frames,
        census.positives,
        census.positive_fraction,
        query.render()
    )
    .map_err(io_error(Path::new("<stdout>")))
}

fn cmd_plan(args: &PlanArgs, seed: Option<u64>, env_file: Option<&Path>) -> Result<(), CliError> {
    if !matches!(
        args.system,
        System::Thia | System::ThiaEi | System::ThiaSingle
    ) {
        return Err(CliError::NotAPlanner(args.system));
    }
    let Loaded {
        store,
        query,
        config,
    } = load(&args.common, seed, env_file)?;
    let query = query.with_confidence_min(config.det_confidence_min);
    let est = match args.system {
        System::Thia => {
            Some(systems::train_estimator(&store, &query, &config).map_err(SystemError::from)?)
        }
        _ => None,
    };
    let mut cache = InferenceCache::new(&store);
    let (plan, planning) = plan_with_cache(
        &store,
        &mut cache,
        &query,
        &config.planner_for(args.system),
        est.as_ref(),
    )?;
    write_json(args.json.as_deref(), &plan)?;
    eprintln!(
        "{} chunks, opt_cost {:.3}, {} samples",
        plan.entries.len(),
        planning.opt_cost,
        planning.samples_evaluated
    );
    Ok(())
}

fn read_plan(path: &Path) -> Result<Plan, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn cmd_run(args: &RunArgs, seed: Option<u64>, env_file: Option<&Path>) -> Result<(), CliError> {
    distinct_outputs(&[args.json.as_ref(), args.csv.as_ref()])?;
    let Loaded {
        store,
        query,
        config,
    } = load(&args.common, seed, env_file)?;
    let report = match &args.plan {
        Some(path) => {
            let plan = read_plan(path)?;
            let query = query.with_confidence_min(config.det_confidence_min);
            let mut cache = InferenceCache::new(&store);
            let ex = execute_with(&store, &mut cache, &plan, &query, config.mode)?;
            let mut r = RunReport::assemble(
                "plan",
                &store,
                &query,
                cache.cost(Phase::Planning),
                ex.exec_cost,
                ex.result_frames,
                ex.ep_usage,
                cache.calls(),
            );
            r.chunk_costs = ex.chunk_costs;
            r.plan = Some(plan);
            r.config = serde_json::to_value(&config).ok();
            r
        }
        None => systems::run_system(&store, &query, args.system, &config)?,
    };
    if let Some(p) = &args.csv {
        write_csv(p, &csv_rows(std::slice::from_ref(&report)))?;
    }
    if args.json.is_some() || args.csv.is_none() {
        write_json(args.json.as_deref(), &report)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompareOutput<'a> {
    rows: Vec<ComparisonRow>,
    reports: &'a [RunReport],
}

fn cmd_compare(
    args: &CompareArgs,
    seed: Option<u64>,
    env_file: Option<&Path>,
) -> Result<(), CliError> {
    distinct_outputs(&[args.json.as_ref(), args.csv.as_ref(), args.series.as_ref()])?;
    let Loaded {
        store,
        query,
        config,
    } = load(&args.common, seed, env_file)?;
    let systems: Vec<System> = if args.system.is_empty() {
        System::ALL.to_vec()
    } else {
        args.system.clone()
    };
    let reports = systems::compare(&store, &query, &systems, &config)?;
    if let Some(p) = &args.csv {
        write_csv(p, &csv_rows(&reports))?;
    }
    if let Some(p) = &args.series {
        let rows: Vec<SeriesRow> = reports
            .iter()
            .flat_map(|r| {
                r.chunk_costs.iter().map(|c| SeriesRow {
                    system: &r.system,
                    start: c.start,
                    end: c.end,
                    action: c.action.to_string(),
                    cost: c.cost,
                })
            })
            .collect();
        write_csv(p, &rows)?;
    }
    let out = CompareOutput {
        rows: reports.iter().map(ComparisonRow::from).collect(),
        reports: &reports,
    };
    if args.json.is_some() {
        write_json(args.json.as_deref(), &out)?;
    } else if args.csv.is_none() {
        print_table(&out.rows);
    }
    Ok(())
}

fn print_table(rows: &[ComparisonRow]) {
    println!(
        "{:<12} {:>12} {:>12} {:>12} {:>9} {:>9} {:>9} {:>8}",
        "system", "opt_cost", "exec_cost", "total_cost", "precision", "recall", "f1", "speedup"
    );
    for r in rows {
        println!(
            "{:<12} {:>12.3} {:>12.3} {:>12.3} {:>9.4} {:>9.4} {:>9.4} {:>8.2}",
            r.system,
            r.opt_cost,
            r.exec_cost,
            r.total_cost,
            r.precision,
            r.recall,
            r.f1,
            r.speedup_vs_naive
        );
    }
}

/// Runs a parsed command line. `env_file` is the value of `EPPLAN_CONFIG`.
pub fn run(cli: &Cli, env_file: Option<&Path>) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(args, cli.seed.unwrap_or(0), &mut io::stdout()),
        Command::Plan(args) => cmd_plan(args, cli.seed, env_file),
        Command::Run(args) => cmd_run(args, cli.seed, env_file),
        Command::Compare(args) => cmd_compare(args, cli.seed, env_file),
    }
}
