//! The `prismlike` command line. Flags override `PRISMLIKE_*` environment
//! variables, which override defaults.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;
use prismlike_core::analyzer::{suggest_ranges, KpiSeries};
use prismlike_core::collector::{run_session, LiveConfig, SessionConfig, Source, DEFAULT_MAX_BRIS_PER_THREAD};
use prismlike_core::model::{Nanos, NANOS_PER_SEC};
use prismlike_core::store::{MetricStore, TemplateLibrary, TsRange};

use crate::api::{self, ApiConfig, TrackRequest};
use crate::error::{CliError, EXIT_OK, EXIT_USAGE};
use crate::workload;

#[derive(Debug, Parser)]
#[command(name = "prismlike", version, about = "Thread-state metrics and degradation diagnosis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record a live session through the probe loader.
    Record(RecordArgs),
    /// Fold a recorded event trace into a new store.
    Replay(ReplayArgs),
    /// Compare two time ranges and print a diagnosis report.
    Analyze(AnalyzeArgs),
    /// Dump store tables as JSON lines.
    Export(ExportArgs),
    /// Serve the HTTP API over a store.
    Serve(ServeArgs),
    /// Run a futex ping-pong pair and a pipe pair, for smoke tests.
    SelftestWorkload(WorkloadArgs),
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// Aggregation window in milliseconds.
    #[arg(long, env = "PRISMLIKE_WINDOW_MS", default_value_t = 1000)]
    pub window_ms: u64,
    /// Resources tracked per thread before the least recent is evicted.
    #[arg(long, env = "PRISMLIKE_MAX_BRIS", default_value_t = DEFAULT_MAX_BRIS_PER_THREAD)]
    pub max_bris: usize,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    /// Bootstrap processes, comma separated.
    #[arg(long, env = "PRISMLIKE_PIDS", value_delimiter = ',', required = true)]
    pub pids: Vec<u32>,
    #[arg(long, env = "PRISMLIKE_OUT")]
    pub out: PathBuf,
    /// Seconds to record; until SIGINT when absent.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Probe loader executable.
    #[arg(long, env = "PRISMLIKE_LOADER", default_value = "prismlike-probes")]
    pub loader: PathBuf,
    /// Extra argument for the loader (repeatable).
    #[arg(long = "loader-arg")]
    pub loader_args: Vec<String>,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, env = "PRISMLIKE_OUT")]
    pub out: PathBuf,
    /// Bootstrap processes; every process in the trace when absent.
    #[arg(long, value_delimiter = ',')]
    pub pids: Option<Vec<u32>>,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, env = "PRISMLIKE_DB")]
    pub db: PathBuf,
    /// Normal period, `t0..t1` in seconds.
    #[arg(long)]
    pub baseline: Option<TsRange>,
    /// Degraded period, `t0..t1` in seconds.
    #[arg(long)]
    pub compare: Option<TsRange>,
    /// Restrict to these processes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pids: Option<Vec<u32>>,
    #[arg(long, env = "PRISMLIKE_ALPHA")]
    pub alpha: Option<f64>,
    /// Test every thread instead of tracking from the entry threads.
    #[arg(long)]
    pub full: bool,
    /// KPI CSV used to pick the ranges when they are not given.
    #[arg(long)]
    pub kpi: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, env = "PRISMLIKE_DB")]
    pub db: PathBuf,
    /// Directory for one `<table>.ndjson` per table.
    #[arg(long, conflicts_with = "table", required_unless_present = "table")]
    pub out: Option<PathBuf>,
    /// Print a single table to stdout.
    #[arg(long)]
    pub table: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PRISMLIKE_DB")]
    pub db: PathBuf,
    #[arg(long, env = "PRISMLIKE_LISTEN", default_value = "127.0.0.1:7878")]
    pub listen: String,
    /// Directory of extra `*.sql` templates.
    #[arg(long, env = "PRISMLIKE_TEMPLATES")]
    pub templates: Option<PathBuf>,
    /// Allow arbitrary read-only SQL on `/query`.
    #[arg(long, env = "PRISMLIKE_UNSAFE_RAW_SQL")]
    pub unsafe_raw_sql: bool,
    /// Largest accepted KPI upload in bytes.
    #[arg(long, env = "PRISMLIKE_KPI_LIMIT", default_value_t = api::DEFAULT_KPI_LIMIT)]
    pub kpi_limit: usize,
    /// Concurrent store requests.
    #[arg(long, env = "PRISMLIKE_WORKERS", default_value_t = api::DEFAULT_WORKERS)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct WorkloadArgs {
    /// Seconds to run; until SIGINT when absent.
    #[arg(long)]
    pub duration: Option<f64>,
}

fn window_ns(args: &WindowArgs) -> Result<Nanos, CliError> {
    if args.window_ms == 0 {
        return Err(CliError::Usage("--window-ms must be positive".into()));
    }
    Ok(args.window_ms * 1_000_000)
}

fn seconds(value: Option<f64>, flag: &str) -> Result<Option<Duration>, CliError> {
    value
        .map(|s| Duration::try_from_secs_f64(s).map_err(|_| CliError::Usage(format!("{flag} must be a non-negative number"))))
        .transpose()
}

fn stop_on_sigint() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install SIGINT handler: {e}");
    }
    stop
}

fn print_json<T: serde::Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Resolves the ranges of an `analyze` run.
pub fn track_request(args: &AnalyzeArgs, window_ns: Nanos) -> Result<TrackRequest, CliError> {
    let (baseline, compare) = match (args.baseline, args.compare, &args.kpi) {
        (Some(b), Some(c), _) => (b, c),
        (None, None, Some(path)) => {
            let kpi = KpiSeries::from_csv("kpi", &std::fs::read_to_string(path)?)?;
            let (b, c, cp) = suggest_ranges(&kpi, window_ns)
                .ok_or_else(|| CliError::Usage("the KPI series has no clear change point; give the ranges".into()))?;
            info!("KPI shifts at {:.3}s ({} -> {})", cp.ts_ns as f64 / 1e9, cp.before_mean, cp.after_mean);
            (b, c)
        }
        _ => return Err(CliError::Usage("give both --baseline and --compare, or --kpi alone".into())),
    };
    let req = TrackRequest { baseline, compare, tgids: args.pids.clone(), alpha: args.alpha, full: args.full };
    req.alpha().map_err(CliError::Usage)?;
    Ok(req)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Record(args) => {
            let duration = seconds(args.duration, "--duration")?;
            let mut live = LiveConfig::new(&args.loader);
            live.loader_args = args.loader_args.clone();
            live.duration = duration;
            live.stop = stop_on_sigint();
            let config = SessionConfig {
                source: Source::Live(live),
                bootstrap_pids: args.pids.clone(),
                window_ns: window_ns(&args.window)?,
                output_db_path: args.out.clone(),
                max_bris_per_thread: args.window.max_bris,
            };
            let summary = run_session(&config)?;
            print_json(out, &summary)
        }
        Command::Replay(args) => {
            let mut config = SessionConfig::replay(&args.trace, &args.out);
            config.bootstrap_pids = args.pids.clone().unwrap_or_default();
            config.window_ns = window_ns(&args.window)?;
            config.max_bris_per_thread = args.window.max_bris;
            let summary = run_session(&config)?;
            print_json(out, &summary)
        }
        Command::Analyze(args) => {
            let store = MetricStore::open_read_only(&args.db)?;
            let req = track_request(&args, store.window_ns()?.unwrap_or(NANOS_PER_SEC))?;
            let response = req.run(&store)?;
            print_json(out, &response)
        }
        Command::Export(args) => {
            let store = MetricStore::open_read_only(&args.db)?;
            match (&args.out, &args.table) {
                (Some(dir), _) => store.export_all(dir)?,
                (None, Some(table)) => out.write_all(store.export_table(table)?.as_bytes())?,
                (None, None) => unreachable!("clap requires one of --out and --table"),
            }
            Ok(())
        }
        Command::Serve(args) => {
            let mut config = ApiConfig::new(&args.db);
            config.allow_raw_sql = args.unsafe_raw_sql;
            config.kpi_limit = args.kpi_limit;
            config.workers = args.workers;
            if let Some(dir) = &args.templates {
                let mut library = TemplateLibrary::builtin();
                library.load_dir(dir)?;
                config.templates = library;
            }
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(&args.listen).await?;
                info!("serving {} on http://{}", args.db.display(), listener.local_addr()?);
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                api::serve(&config, listener, shutdown).await
            })?;
            Ok(())
        }
        Command::SelftestWorkload(args) => {
            let duration = seconds(args.duration, "--duration")?;
            writeln!(out, "{}", std::process::id())?;
            out.flush()?;
            let (handoffs, messages) = workload::run(duration, stop_on_sigint())?;
            info!("{handoffs} lock handoffs, {messages} pipe messages");
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
