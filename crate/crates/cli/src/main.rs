//! `tdbo`: run time-dependent Bayesian optimization benchmarks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tdbo::bench::{self, Method, RunConfig, RunRecord};
use tdbo::lookahead::GradientMode;
use tdbo::testbed::{load_table_oracle, Function, OracleSpec, TableOptions};

#[derive(Parser, Debug)]
#[command(name = "tdbo", version, about = "Time-dependent Bayesian optimization benchmarks")]
struct Cli {
    /// Worker threads; `TDBO_THREADS` takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replicate one method on one test case.
    Run {
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep test cases x methods.
    Suite {
        /// Comma-separated case names (or `table:<csv path>`).
        #[arg(long, value_delimiter = ',')]
        cases: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate record files into a summary CSV.
    Summarize {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit CSV data for regret plots, trajectories and 1-d contours.
    PlotData {
        records: PathBuf,
        #[arg(long, default_value = "plot-data")]
        out: PathBuf,
        /// Grid resolution of the contour data along each axis.
        #[arg(long, default_value_t = 101)]
        resolution: usize,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Observation noise standard deviation (absolute).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    n_initial: Option<usize>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// TOML file with defaults for any of the options above.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Settings readable from `--config`; flags override them.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    case: Option<String>,
    method: Option<String>,
    cases: Option<Vec<String>>,
    methods: Option<Vec<String>>,
    reps: Option<usize>,
    seed: Option<u64>,
    mc_samples: Option<usize>,
    steps: Option<usize>,
    horizon: Option<f64>,
    noise: Option<f64>,
    n_initial: Option<usize>,
    t_train_end: Option<f64>,
    fit_starts: Option<usize>,
    ucb_beta: Option<f64>,
    gradient_mode: Option<GradientMode>,
    inner_starts: Option<usize>,
    inner_ascents: Option<usize>,
    outer_starts: Option<usize>,
    latin_hypercube: Option<bool>,
    record_wall_clock: Option<bool>,
    threads: Option<usize>,
}

/// Errors in user input, reported with exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config file {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("invalid config file {}: {e}", path.display())))
}

fn oracle_for(case: &str, file: &FileConfig, common: &Common) -> anyhow::Result<OracleSpec> {
    let mut oracle = match case.strip_prefix("table:") {
        Some(path) => load_table_oracle(Path::new(path), None, &TableOptions::default())
            .map_err(|e| config_err(format!("cannot load table {path}: {e}")))?,
        None => {
            let f = Function::from_name(case).ok_or_else(|| {
                let known: Vec<&str> = Function::ALL.iter().map(|f| f.name()).collect();
                config_err(format!("unknown case `{case}` (known: {}, or table:<path>)", known.join(", ")))
            })?;
            let horizon = common.horizon.or(file.horizon).unwrap_or(4.0);
            if !(horizon > 0.0) {
                return Err(config_err(format!("horizon must be positive, got {horizon}")));
            }
            OracleSpec::synthetic(f, horizon)
        }
    };
    if let Some(noise) = common.noise.or(file.noise) {
        oracle = oracle.with_noise(noise).map_err(|e| config_err(e.to_string()))?;
    }
    Ok(oracle)
}

fn parse_method(name: &str) -> anyhow::Result<Method> {
    Method::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        config_err(format!("unknown method `{name}` (known: {})", known.join(", ")))
    })
}

fn build_config(oracle: OracleSpec, method: Method, file: &FileConfig, common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::new(oracle, method);
    if let Some(h) = common.horizon.or(file.horizon) {
        cfg.horizon = h;
        if file.t_train_end.is_none() {
            cfg.t_train_end = cfg.oracle.time_range.0 + (h - cfg.oracle.time_range.0) / 2.0;
        }
    }
    if let Some(v) = file.t_train_end {
        cfg.t_train_end = v;
    }
    if let Some(v) = common.reps.or(file.reps) {
        cfg.replications = v;
    }
    if let Some(v) = common.seed.or(file.seed) {
        cfg.seed = v;
    }
    if let Some(v) = common.mc_samples.or(file.mc_samples) {
        cfg.lookahead.mc_samples = v;
    }
    if let Some(v) = common.steps.or(file.steps) {
        cfg.m_steps = v;
    }
    if let Some(v) = common.n_initial.or(file.n_initial) {
        cfg.n_initial = v;
    }
    if let Some(v) = file.fit_starts {
        cfg.fit.n_starts = v;
    }
    if let Some(v) = file.ucb_beta {
        cfg.ucb_beta = v;
    }
    if let Some(v) = file.gradient_mode {
        cfg.lookahead.gradient_mode = v;
    }
    if file.inner_starts.is_some() {
        cfg.lookahead.inner_starts = file.inner_starts;
    }
    if file.inner_ascents.is_some() {
        cfg.lookahead.inner_ascents = file.inner_ascents;
    }
    if file.outer_starts.is_some() {
        cfg.lookahead.outer_starts = file.outer_starts;
    }
    if let Some(v) = file.latin_hypercube {
        cfg.latin_hypercube = v;
    }
    if let Some(v) = file.record_wall_clock {
        cfg.record_wall_clock = v;
    }
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}

fn write_outputs(dir: &Path, records: &[RunRecord]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    bench::write_records(&dir.join("records.jsonl"), records)?;
    let rows = bench::summarize(records);
    bench::write_summary(&dir.join("summary.csv"), &rows)?;
    for r in &rows {
        log::info!(
            "{} {}: mean {:.3} +- {:.3}, median {:.3} over {} reps",
            r.case,
            r.method,
            r.mean,
            r.stderr,
            r.median,
            r.reps
        );
    }
    Ok(())
}

fn run_cells(cells: Vec<RunConfig>, out: &Path) -> anyhow::Result<()> {
    let mut records = Vec::new();
    for cfg in cells {
        log::info!("{} / {}: {} replications", cfg.oracle.name, cfg.method, cfg.replications);
        records.extend(bench::replicate(&cfg)?);
    }
    write_outputs(out, &records)
}

fn plot_data(records: &Path, out: &Path, resolution: usize) -> anyhow::Result<()> {
    if resolution < 2 {
        return Err(config_err("resolution must be at least 2"));
    }
    let records = bench::read_records(records)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut w = csv_writer(&out.join("regret.csv"))?;
    w.write_record(["case", "d", "method", "replication", "regret"])?;
    for r in &records {
        w.write_record([
            r.case.clone(),
            r.d.to_string(),
            r.method.to_string(),
            r.replication.to_string(),
            r.regret.to_string(),
        ])?;
    }
    w.flush()?;

    let max_d = records.iter().map(|r| r.d).max().unwrap_or(1);
    let mut w = csv_writer(&out.join("trajectories.csv"))?;
    let mut header: Vec<String> = ["case", "method", "replication", "phase", "index", "t"].map(String::from).to_vec();
    header.extend((1..=max_d).map(|j| format!("x{j}")));
    header.push("y".into());
    w.write_record(&header)?;
    for r in &records {
        let phases = [("initial", &r.initial), ("step", &r.steps)];
        for (phase, obs) in phases {
            for (i, o) in obs.iter().enumerate() {
                let mut row = vec![
                    r.case.clone(),
                    r.method.to_string(),
                    r.replication.to_string(),
                    phase.to_string(),
                    i.to_string(),
                    o.t.to_string(),
                ];
                row.extend((0..max_d).map(|j| o.x.get(j).map_or_else(String::new, |v| v.to_string())));
                row.push(o.y.to_string());
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("contour.csv"))?;
    w.write_record(["case", "x", "t", "f"])?;
    let mut seen: Vec<&str> = Vec::new();
    for r in &records {
        if r.d != 1 || seen.contains(&r.case.as_str()) {
            continue;
        }
        seen.push(&r.case);
        let Some(f) = Function::from_name(&r.case) else {
            continue;
        };
        let horizon = r.steps.last().map_or(4.0, |o| o.t);
        let dom = f.domain();
        for i in 0..resolution {
            let t = horizon * i as f64 / (resolution - 1) as f64;
            for j in 0..resolution {
                let x = dom.from_unit(&[j as f64 / (resolution - 1) as f64]);
                w.write_record([r.case.clone(), x[0].to_string(), t.to_string(), f.eval(&x, t).to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn thread_count(flag: Option<usize>, file: Option<usize>) -> anyhow::Result<Option<usize>> {
    if let Ok(v) = std::env::var("TDBO_THREADS") {
        let n = v
            .trim()
            .parse::<usize>()
            .map_err(|_| config_err(format!("TDBO_THREADS must be a positive integer, got `{v}`")))?;
        return Ok(Some(n));
    }
    Ok(flag.or(file))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.command {
        Command::Run { common, .. } | Command::Suite { common, .. } => load_config(common.config.as_deref())?,
        _ => FileConfig::default(),
    };
    if let Some(n) = thread_count(cli.threads, file.threads)? {
        if n == 0 {
            return Err(config_err("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }

    match cli.command {
        Command::Run { case, method, common } => {
            let case = case
                .or_else(|| file.case.clone())
                .ok_or_else(|| config_err("`run` needs --case (or `case` in the config file)"))?;
            let method = method
                .or_else(|| file.method.clone())
                .ok_or_else(|| config_err("`run` needs --method (or `method` in the config file)"))?;
            let oracle = oracle_for(&case, &file, &common)?;
            let cfg = build_config(oracle, parse_method(&method)?, &file, &common)?;
            run_cells(vec![cfg], &common.out)
        }
        Command::Suite { cases, methods, common } => {
            let cases = if cases.is_empty() { file.cases.clone().unwrap_or_default() } else { cases };
            let methods = if methods.is_empty() { file.methods.clone().unwrap_or_default() } else { methods };
            if cases.is_empty() || methods.is_empty() {
                return Err(config_err("`suite` needs --cases and --methods"));
            }
            let methods = methods.iter().map(|m| parse_method(m)).collect::<anyhow::Result<Vec<_>>>()?;
            let mut cells = Vec::new();
            for case in &cases {
                let oracle = oracle_for(case, &file, &common)?;
                let extrema = None;
                for &m in &methods {
                    let mut cfg = build_config(oracle.clone(), m, &file, &common)?;
                    cfg.extrema = extrema;
                    cells.push(cfg);
                }
            }
            // extrema depend only on the case and horizon; compute once per case
            let mut cached: Vec<(String, f64, (f64, f64))> = Vec::new();
            for cfg in &mut cells {
                let hit = cached.iter().find(|(n, h, _)| *n == cfg.oracle.name && *h == cfg.horizon).map(|c| c.2);
                let e = hit.unwrap_or_else(|| cfg.extrema());
                if hit.is_none() {
                    cached.push((cfg.oracle.name.clone(), cfg.horizon, e));
                }
                cfg.extrema = Some(e);
            }
            run_cells(cells, &common.out)
        }
        Command::Summarize { records, out } => {
            let mut all = Vec::new();
            for p in &records {
                all.extend(bench::read_records(p).map_err(|e| config_err(e.to_string()))?);
            }
            let rows = bench::summarize(&all);
            match out {
                Some(path) => bench::write_summary(&path, &rows)?,
                None => {
                    println!("case,d,method,mean,stderr,median,q25,q75,reps");
                    for r in rows {
                        println!(
                            "{},{},{},{},{},{},{},{},{}",
                            r.case, r.d, r.method, r.mean, r.stderr, r.median, r.q25, r.q75, r.reps
                        );
                    }
                }
            }
            Ok(())
        }
        Command::PlotData { records, out, resolution } => plot_data(&records, &out, resolution),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
