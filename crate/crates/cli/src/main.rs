//! Command-line surface over the eigenscore engine.
//!
//! Subcommands:
//!
//! - `score`: exact and/or approximate score of an EMB1 snapshot, as JSON.
//! - `bench`: the runtime scaling sweep, as CSV.
//! - `sei`: sensitive-embedding-index detection over a checkpoint
//!   manifest, as JSON.
//! - `send-sim`: SenD and/or plain training runs of the toy model, as
//!   line-delimited JSON run logs plus summary and comparison files.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 file format or config schema,
//! 5 convergence failure, 6 training divergence. The default seed may be
//! supplied via `EIGENSCORE_SEED`; explicit `--seed` flags win.

use clap::{Args, Parser, Subcommand, ValueEnum};
use eigenscore::linalg::LinalgError;
use eigenscore::scores::{self, EesConfig, ScoreError};
use eigenscore::send::{self, SendConfig, SendError, ToyModelConfig};
use eigenscore::sensitivity::{self, SensitivityError};
use eigenscore::snapshot::{self, SnapshotError};
use eigenscore::bench;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const SEED_ENV: &str = "EIGENSCORE_SEED";

const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_CONVERGENCE: u8 = 5;
const EXIT_DIVERGENCE: u8 = 6;

#[derive(Parser)]
#[command(
    name = "eigenscore",
    about = "Spectral hallucination metrics, SEI detection, and SenD simulation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score an embedding snapshot with the exact and/or approximate path.
    Score(ScoreArgs),
    /// Sweep matrix shapes and moment counts, timing both score paths.
    Bench(BenchArgs),
    /// Detect sensitive embedding indices from a checkpoint manifest.
    Sei(SeiArgs),
    /// Run the SenD protocol and/or its control arm on the toy model.
    SendSim(SendSimArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Exact,
    Ees,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimMode {
    Send,
    Normal,
    Both,
}

#[derive(Args)]
struct ScoreArgs {
    /// EMB1 snapshot to score.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    method: Method,
    /// Covariance regularization for the exact path.
    #[arg(long, default_value_t = scores::DEFAULT_ALPHA)]
    alpha: f64,
    /// Chebyshev terms M.
    #[arg(long, default_value_t = 20)]
    moments: usize,
    /// Stochastic trace probes N_z.
    #[arg(long, default_value_t = 32)]
    trace_samples: usize,
    /// Quadrature resolution N_q.
    #[arg(long, default_value_t = 2048)]
    quad_points: usize,
    /// Eigenvalue floor inside the log quadrature.
    #[arg(long, default_value_t = 1e-8)]
    floor: f64,
    #[arg(long, default_value_t = 1e-9)]
    power_tol: f64,
    #[arg(long, default_value_t = 10_000)]
    power_max_iter: usize,
    /// Seed for the approximate path (falls back to EIGENSCORE_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated row counts.
    #[arg(long, value_delimiter = ',', required = true)]
    rows: Vec<usize>,
    /// Comma-separated column counts.
    #[arg(long, value_delimiter = ',', required = true)]
    cols: Vec<usize>,
    /// Comma-separated moment counts.
    #[arg(long, value_delimiter = ',', default_value = "20")]
    moments: Vec<usize>,
    /// Measured repetitions per cell after one warm-up (median reported).
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = scores::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SeiArgs {
    /// Checkpoint manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Trailing window: number of net-change deltas per series.
    #[arg(long, default_value_t = 3)]
    window: usize,
    #[arg(long, default_value_t = 20.0)]
    k_percent: f64,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SendSimArgs {
    /// Run configuration (JSON; missing fields take defaults).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: SimMode,
    /// Directory for run logs and reports.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Convergence(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Format(_) => EXIT_FORMAT,
            CliError::Convergence(_) => EXIT_CONVERGENCE,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl From<SnapshotError> for CliError {
    fn from(e: SnapshotError) -> Self {
        match e {
            SnapshotError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        match &e {
            ScoreError::PowerMethod(LinalgError::ConvergenceFailure { .. })
            | ScoreError::Linalg(LinalgError::ConvergenceFailure { .. }) => {
                CliError::Convergence(e.to_string())
            }
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<SendError> for CliError {
    fn from(e: SendError) -> Self {
        match &e {
            SendError::Divergence { .. } => CliError::Divergence(e.to_string()),
            SendError::Score(inner) => match inner {
                ScoreError::PowerMethod(LinalgError::ConvergenceFailure { .. }) => {
                    CliError::Convergence(e.to_string())
                }
                _ => CliError::Format(e.to_string()),
            },
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<SensitivityError> for CliError {
    fn from(e: SensitivityError) -> Self {
        CliError::Format(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn env_seed() -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|v| v.parse::<u64>().ok())
        .unwrap_or(0)
}

fn emit(output: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match output {
        Some(path) => fs::write(path, text).map_err(|e| io_err(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(args) => cmd_score(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Sei(args) => cmd_sei(args),
        Command::SendSim(args) => cmd_send_sim(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let matrix = snapshot::read_snapshot(&args.input)?;
    let cfg = EesConfig {
        moments: args.moments,
        trace_samples: args.trace_samples,
        quad_points: args.quad_points,
        lambda_floor: args.floor,
        power_tol: args.power_tol,
        power_max_iter: args.power_max_iter,
        seed: args.seed.unwrap_or_else(env_seed),
    };
    let mut reports = Vec::new();
    if matches!(args.method, Method::Exact | Method::Both) {
        reports.push(scores::exact_eigenscore(&matrix, args.alpha)?);
    }
    if matches!(args.method, Method::Ees | Method::Both) {
        reports.push(scores::efficient_eigenscore(&matrix, &cfg)?);
    }
    let json = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])
    } else {
        serde_json::to_string_pretty(&reports)
    }
    .expect("score reports serialize");
    emit(args.output.as_ref(), &json)
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let grid = bench::BenchGrid {
        rows: args.rows,
        cols: args.cols,
        moments: args.moments,
        repeats: args.repeats,
        seed: args.seed.unwrap_or_else(env_seed),
        alpha: args.alpha,
        ..bench::BenchGrid::default()
    };
    let outcomes = bench::run_grid(&grid).map_err(|e| CliError::Format(e.to_string()))?;
    let mut records = Vec::new();
    for cell in outcomes {
        match cell.outcome {
            Ok(rec) => records.push(rec),
            Err(e) => eprintln!(
                "cell {}x{} M={} failed: {e}",
                cell.rows, cell.cols, cell.moments
            ),
        }
    }
    emit(args.output.as_ref(), &bench::format_csv(&records))
}

#[derive(Serialize)]
struct SeiOutput {
    window: usize,
    k_percent: f64,
    selected: Vec<usize>,
    average_variability: Vec<f64>,
    per_datapoint: Vec<SeiDatapoint>,
    degenerate_variability: bool,
}

#[derive(Serialize)]
struct SeiDatapoint {
    id: String,
    variability: Vec<f64>,
}

fn cmd_sei(args: SeiArgs) -> Result<(), CliError> {
    let manifest = snapshot::CheckpointManifest::load(&args.manifest)?;
    let base = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let series = manifest.load_series(&base)?;

    let mut per_datapoint = Vec::new();
    let mut profiles = Vec::new();
    for s in &series {
        let v = sensitivity::variability(s, args.window)?;
        per_datapoint.push(SeiDatapoint {
            id: s.datapoint_id.clone(),
            variability: v.as_slice().to_vec(),
        });
        profiles.push(v);
    }
    let v_avg = sensitivity::average_variability(&profiles)?;
    let degenerate = v_avg.as_slice().iter().all(|&x| x == 0.0);
    if degenerate {
        eprintln!(
            "warning: variability is identically zero; selection falls back to the index tie rule"
        );
    }
    let profile = sensitivity::select_sensitive(&v_avg, args.k_percent)?;
    let out = SeiOutput {
        window: args.window,
        k_percent: args.k_percent,
        selected: profile.selected,
        average_variability: v_avg.as_slice().to_vec(),
        per_datapoint,
        degenerate_variability: degenerate,
    };
    emit(
        args.output.as_ref(),
        &serde_json::to_string_pretty(&out).expect("sei output serializes"),
    )
}

/// Schema of the `send-sim --config` file. Every field has a default, so
/// `{}` is a valid config.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimConfig {
    model: ToyModelConfig,
    send: SendConfig,
    corpus: CorpusSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CorpusSpec {
    items: usize,
    seq_len: usize,
    noise: f64,
    seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            items: 200,
            seq_len: 24,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct RunSummary {
    mode: send::RunMode,
    seed: u64,
    converged: bool,
    checkpoints: usize,
    final_loss: f64,
    final_ees: f64,
    total_wall_seconds: f64,
}

fn summarize(log: &send::RunLog) -> RunSummary {
    let last = log.records.last();
    RunSummary {
        mode: log.mode,
        seed: log.seed,
        converged: log.converged,
        checkpoints: log.records.len(),
        final_loss: last.map_or(f64::NAN, |r| r.train_loss),
        final_ees: last.map_or(f64::NAN, |r| r.ees),
        total_wall_seconds: log.records.iter().map(|r| r.wall_seconds).sum(),
    }
}

fn write_run_log(dir: &Path, name: &str, log: &send::RunLog) -> Result<(), CliError> {
    let log_path = dir.join(format!("{name}.jsonl"));
    let mut file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    for record in &log.records {
        let line = serde_json::to_string(record).expect("checkpoint records serialize");
        writeln!(file, "{line}").map_err(|e| io_err(&log_path, e))?;
    }
    let summary_path = dir.join(format!("{name}-summary.json"));
    let summary =
        serde_json::to_string_pretty(&summarize(log)).expect("run summaries serialize");
    fs::write(&summary_path, summary).map_err(|e| io_err(&summary_path, e))
}

fn cmd_send_sim(args: SendSimArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let mut deserializer = serde_json::Deserializer::from_str(&text);
    let cfg: SimConfig = serde_path_to_error::deserialize(&mut deserializer).map_err(|e| {
        CliError::Format(format!(
            "{}: at {}: {}",
            args.config.display(),
            e.path(),
            e.inner()
        ))
    })?;
    fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;

    let corpus = send::synthetic_corpus(
        cfg.corpus.items,
        cfg.corpus.seq_len,
        cfg.model.vocab,
        cfg.corpus.noise,
        cfg.corpus.seed,
    );

    let mut send_log = None;
    let mut normal_log = None;
    if matches!(args.mode, SimMode::Send | SimMode::Both) {
        let log = send::send_loop(&cfg.send, &cfg.model, &corpus)?;
        write_run_log(&args.out_dir, "send", &log)?;
        send_log = Some(log);
    }
    if matches!(args.mode, SimMode::Normal | SimMode::Both) {
        let log = send::normal_loop(&cfg.send, &cfg.model, &corpus)?;
        write_run_log(&args.out_dir, "normal", &log)?;
        normal_log = Some(log);
    }
    if let (Some(s), Some(n)) = (&send_log, &normal_log) {
        let report = send::compare_runs(s, n)?;
        let path = args.out_dir.join("comparison.json");
        let json = serde_json::to_string_pretty(&report).expect("comparison serializes");
        fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    }
    // Echo the effective config so a run can be replayed exactly.
    let echo_path = args.out_dir.join("config-echo.json");
    let echo = serde_json::to_string_pretty(&cfg).expect("config echoes");
    fs::write(&echo_path, echo).map_err(|e| io_err(&echo_path, e))?;
    Ok(())
}
