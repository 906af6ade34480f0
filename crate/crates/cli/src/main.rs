//! `fedbench` command line: generate environments, run episodes, score traces
//! and merge reports.
//!
//! Exit codes: 0 success, 1 unexpected i/o failure, 2 config parse failure,
//! 3 destination conflict or missing workspace, 4 no run completed,
//! 5 trace or manifest schema mismatch, 6 no reports found.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use fedbench::envgen::{generate_environment, EnvError};
use fedbench::harness::{
    evaluate_dir, find_reports, manifest_summary, plot_series, run_all, summary_json, write_report, GenerateConfig,
    HarnessError, RunConfig, MANIFEST_FILE,
};
use fedbench::evaluator::leaderboard;
use fedbench::protocol::GuidanceMode;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Stdout output that ignores a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! say_raw {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_WORKSPACE: u8 = 3;
const EXIT_NO_RUN: u8 = 4;
const EXIT_SCHEMA: u8 = 5;
const EXIT_NO_REPORTS: u8 = 6;

#[derive(Parser)]
#[command(name = "fedbench", version, about = "Agent-driven federated learning benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-client workspace and its manifest.
    Generate(GenerateArgs),
    /// Run N isolated episodes against a workspace.
    Run(RunArgs),
    /// Score a directory of run traces.
    Evaluate(EvaluateArgs),
    /// Merge reports into a leaderboard and plot data.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generate config file (TOML).
    config: PathBuf,
    /// Destination directory; overrides `output`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides `environment.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// Run config file (TOML).
    config: PathBuf,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    workspace: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    label: Option<String>,
    /// fine_grained or goal_oriented.
    #[arg(long)]
    guidance: Option<GuidanceMode>,
    #[arg(long)]
    turn_budget: Option<usize>,
    #[arg(long)]
    token_budget: Option<u64>,
    /// Let per-client conversations run concurrently.
    #[arg(long)]
    concurrent: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Output directory of a `run` invocation.
    traces: PathBuf,
    /// Manifest file or workspace directory; defaults to the one recorded by the run.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Report directory; defaults to the traces directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched recursively for report.json files.
    reports: PathBuf,
    /// Output directory; defaults to the reports directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match e {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Workspace(_) => EXIT_WORKSPACE,
            HarnessError::Schema(_) => EXIT_SCHEMA,
            HarnessError::Io(_) => EXIT_IO,
        };
        Failure::new(code, e)
    }
}

fn io(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(EXIT_IO, e)
}

fn read_config(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(|e| Failure::new(EXIT_CONFIG, e))
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let mut config = GenerateConfig::from_toml(&read_config(&args.config)?)?;
    if let Some(o) = args.output {
        config.output = o;
    }
    if let Some(s) = args.seed {
        config.environment.seed = s;
    }
    let (root, manifest) = generate_environment(&config.environment, &config.output).map_err(|e| match e {
        EnvError::DestinationNotEmpty(_) => Failure::new(EXIT_WORKSPACE, e),
        EnvError::InvalidConfig(_) => Failure::new(EXIT_CONFIG, e),
        other => io(other),
    })?;
    let bytes = fs::read(root.join(MANIFEST_FILE)).map_err(io)?;
    say!("workspace: {}", root.display());
    say!("{:#}", manifest_summary(&manifest, &bytes));
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut config = RunConfig::from_toml(&read_config(&args.config)?)?;
    if let Some(w) = args.workspace {
        config.workspace = Some(w);
    }
    if let Some(o) = args.output {
        config.output = o;
    }
    if let Some(n) = args.runs {
        config.runs = n;
        config.seeds = config.seeds.filter(|s| s.len() >= n);
    }
    if let Some(s) = args.seed {
        config.seed = s;
        config.seeds = None;
    }
    if let Some(l) = args.label {
        config.label = Some(l);
    }
    if let Some(g) = args.guidance {
        config.guidance_mode = Some(g);
    }
    if let Some(b) = args.turn_budget {
        config.turn_budget = b;
    }
    if let Some(b) = args.token_budget {
        config.token_budget = b;
    }
    if args.concurrent {
        config.deterministic = false;
    }
    if let Some(ws) = &config.workspace {
        if !ws.is_dir() {
            return Err(Failure::new(EXIT_WORKSPACE, anyhow!("workspace {} does not exist", ws.display())));
        }
    }
    let summary = run_all(&config, args.jobs)?;
    for m in &summary.metas {
        say!(
            "run {:02} seed {} {}",
            m.run_index + 1,
            m.seed,
            if m.completed { "completed" } else { "failed" }
        );
    }
    say!("{:#}", summary_json(&summary));
    if summary.completed() == 0 {
        return Err(Failure::new(EXIT_NO_RUN, anyhow!("no run completed")));
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    if !args.traces.is_dir() {
        return Err(Failure::new(
            EXIT_WORKSPACE,
            anyhow!("traces directory {} does not exist", args.traces.display()),
        ));
    }
    let report = evaluate_dir(&args.traces, args.manifest.as_deref())?;
    let out = args.out.unwrap_or(args.traces);
    for p in write_report(&report, &out).map_err(io)? {
        say!("wrote {}", p.display());
    }
    say_raw!("{}", report.to_markdown());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let reports = if args.reports.is_dir() {
        find_reports(&args.reports)?
    } else {
        Vec::new()
    };
    if reports.is_empty() {
        return Err(Failure::new(
            EXIT_NO_REPORTS,
            anyhow!("no report.json found under {}", args.reports.display()),
        ));
    }
    let out = args.out.unwrap_or(args.reports);
    fs::create_dir_all(&out).map_err(io)?;
    let (md, csv) = leaderboard(&reports);
    for (name, body) in [
        ("leaderboard.md", md.as_str()),
        ("leaderboard.csv", csv.as_str()),
        ("plot_tokens.csv", plot_series(&reports).as_str()),
    ] {
        let p = out.join(name);
        fs::write(&p, body).map_err(io)?;
        say!("wrote {}", p.display());
    }
    say_raw!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
