use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use specsched::costmodel::{calibrate, Calibration, CostCoefficients};
use specsched::predictor::predict_eval;
use specsched::simcore::{self, profile, SweepSpec};
use specsched::workload::{generate_trace, load_trace, sample_corpus, save_trace, summarize_trace, Trace};
use specsched::{PolicyKind, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "specsched", version, about = "Simulator for speculative preemptive LLM serving")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set scheduler.max_batch=64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a Poisson-arrival trace and its summary.
    Generate(GenerateArgs),
    /// Profile the simulated executor and fit the cost model.
    Calibrate(CalibrateArgs),
    /// Simulate one policy on one trace.
    Run(RunArgs),
    /// Simulate every policy x rate x seed combination.
    Sweep(SweepArgs),
    /// Compare retrieval-based and regressor-only length prediction.
    PredictEval(PredictEvalArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output trace (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Summary JSON; defaults to `<out>.summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    rate: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Input lengths to profile, comma separated.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<u32>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Input trace; generated from the workload config when omitted.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    /// MetricsReport JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-request CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON-lines event log.
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    policies: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    rates: Vec<f64>,
    /// Defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Long-format comparison CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictEvalArgs {
    /// Corpus trace with prompt tokens; sampled from the workload preset
    /// when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Size of the sampled corpus.
    #[arg(long, default_value_t = 2000)]
    size: usize,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Defaults to the config seed.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    bin_width: u32,
    /// Insert each test request into the database after predicting it.
    #[arg(long)]
    online_update: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Some sweep runs failed; the others were still written.
#[derive(Debug, thiserror::Error)]
#[error("{failed} sweep run(s) failed")]
pub struct SweepFailed {
    failed: usize,
    runtime_abort: bool,
}

/// Maps an error chain to the process exit code: 3 for runtime aborts, 4 for
/// I/O, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<specsched::Error>() {
            if e.is_runtime_abort() {
                return 3;
            }
            if e.is_io() {
                return 4;
            }
        }
        if let Some(s) = cause.downcast_ref::<SweepFailed>() {
            return if s.runtime_abort { 3 } else { 2 };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                return 4;
            }
        }
    }
    2
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&config, a),
        Command::Calibrate(a) => cmd_calibrate(&config, a),
        Command::Run(a) => cmd_run(config, a),
        Command::Sweep(a) => cmd_sweep(config, a),
        Command::PredictEval(a) => cmd_predict_eval(&config, a),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(overrides)?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn cmd_generate(config: &RunConfig, a: GenerateArgs) -> Result<()> {
    let mut cfg = config.clone();
    if let Some(p) = a.preset {
        cfg.workload.preset = p;
    }
    let dist = cfg.length_distribution()?;
    let rate = a.rate.unwrap_or(cfg.workload.rate);
    let duration = a.duration.unwrap_or(cfg.workload.duration_s);
    let trace = generate_trace(rate, duration, &dist, a.seed.unwrap_or(cfg.seed))?;
    save_trace(&trace, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let summary_path = a.summary.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".summary.json");
        p.into()
    });
    write_json(&summary_path, &summarize_trace(&trace))?;
    println!("wrote {} requests to {}", trace.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct CalibrationFile {
    #[serde(flatten)]
    coefficients: CostCoefficients<f64>,
    std_errors: CostCoefficients<f64>,
    residual_rms_prefill: f64,
    residual_rms_step: f64,
    samples: usize,
    grid: Vec<u32>,
    reps: usize,
    seed: u64,
    ground_truth: CostCoefficients<f64>,
    sigma: f64,
}

fn cmd_calibrate(config: &RunConfig, a: CalibrateArgs) -> Result<()> {
    let grid = a.grid.unwrap_or_else(|| config.costmodel.grid.clone());
    let reps = a.reps.unwrap_or(config.costmodel.reps);
    let seed = a.seed.unwrap_or(config.seed);
    let samples = profile(&config.executor, &grid, reps, seed)?;
    let Calibration {
        coefficients,
        std_errors,
        residual_rms_prefill,
        residual_rms_step,
        samples,
    } = calibrate(&samples)?;
    let ex = &config.executor;
    let file = CalibrationFile {
        coefficients,
        std_errors,
        residual_rms_prefill,
        residual_rms_step,
        samples,
        grid,
        reps,
        seed,
        ground_truth: CostCoefficients::new(ex.t0, ex.alpha, ex.beta)?,
        sigma: ex.sigma,
    };
    write_json(&a.out, &file)?;
    println!(
        "T0={:.6} alpha={:.6} beta={:.6} ({} samples)",
        coefficients.t0, coefficients.alpha, coefficients.beta, samples
    );
    Ok(())
}

fn cmd_run(mut config: RunConfig, a: RunArgs) -> Result<()> {
    if let Some(p) = &a.policy {
        config.policy = p.parse()?;
    }
    let trace = match &a.trace {
        Some(p) => load_trace(p).with_context(|| format!("reading trace {}", p.display()))?,
        None => generate_trace(
            config.workload.rate,
            config.workload.duration_s,
            &config.length_distribution()?,
            config.seed,
        )?,
    };
    let prepared = simcore::prepare(&config, config.seed, config.policy.uses_predictor())?;
    let report = match &a.events {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut log = BufWriter::new(file);
            let report = simcore::run_prepared(&trace, &config, &prepared, Some(&mut log));
            log.flush().with_context(|| format!("writing {}", path.display()))?;
            report?
        }
        None => simcore::run_prepared(&trace, &config, &prepared, None)?,
    };
    write_bytes(&a.out, format!("{}\n", report.to_json()?).as_bytes())?;
    if let Some(path) = &a.csv {
        write_requests_csv(path, &report).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", report.summary_line());
    Ok(())
}

fn write_requests_csv(path: &Path, report: &specsched::MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.requests {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    policy: &'a str,
    rate: f64,
    seeds: usize,
    normalized_latency_ms_per_token: f64,
    baseline_ms_per_token: f64,
    mean_e2e_ms: f64,
    throughput: f64,
    knee: bool,
    knee_rate: Option<f64>,
}

fn cmd_sweep(config: RunConfig, a: SweepArgs) -> Result<()> {
    let policies = a
        .policies
        .iter()
        .map(|p| p.parse::<PolicyKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = a.seeds.unwrap_or_else(|| vec![config.seed]);
    let spec = SweepSpec {
        base: config,
        policies,
        rates: a.rates,
        seeds,
    };
    let outcome = simcore::sweep(&spec)?;
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    for row in &outcome.table.rows {
        w.serialize(SweepRow {
            policy: &row.policy,
            rate: row.rate,
            seeds: row.seeds,
            normalized_latency_ms_per_token: row.normalized_latency_ms_per_token,
            baseline_ms_per_token: row.baseline_ms_per_token,
            mean_e2e_ms: row.mean_e2e_ms,
            throughput: row.throughput_rps,
            knee: row.knee,
            knee_rate: row.knee_rate,
        })?;
    }
    w.flush().with_context(|| format!("writing {}", a.out.display()))?;
    for f in &outcome.failures {
        eprintln!("run failed: policy={} rate={} seed={}: {}", f.policy, f.rate, f.seed, f.error);
    }
    println!(
        "wrote {} rows to {} ({} failed runs)",
        outcome.table.rows.len(),
        a.out.display(),
        outcome.failures.len()
    );
    if !outcome.failures.is_empty() {
        bail!(SweepFailed {
            failed: outcome.failures.len(),
            runtime_abort: outcome.failures.iter().any(|f| f.runtime_abort),
        });
    }
    Ok(())
}

fn cmd_predict_eval(config: &RunConfig, a: PredictEvalArgs) -> Result<()> {
    let split_seed = a.split_seed.unwrap_or(config.seed);
    let corpus = match &a.corpus {
        Some(p) => {
            let t: Trace = load_trace(p).with_context(|| format!("reading corpus {}", p.display()))?;
            t.requests
        }
        None => sample_corpus(a.size, &config.length_distribution()?, config.seed)?,
    };
    let report = predict_eval(
        &corpus,
        &config.predictor,
        a.train_fraction,
        split_seed,
        a.bin_width,
        a.online_update,
    )?;
    write_json(&a.out, &report)?;
    for m in &report.methods {
        println!(
            "{}: accuracy={:.4} pred_error={:.4} latency={:.4} ms",
            m.method, m.metrics.accuracy, m.metrics.pred_error, m.metrics.mean_latency_ms
        );
    }
    Ok(())
}
