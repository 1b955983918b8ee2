//! Command surface: `run`, `parse-report`, `render-prompt`, `summarize`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use tracing::{error, info, warn};

use crate::config::{load_config, render_prompt, Config, ConfigError, Overrides, PromptContext, PromptSet, RenderError};
use crate::evaluator::EvalError;
use crate::llm::ProviderKind;
use crate::optreport::{parse_report, CompilerError, ReportDialect};
use crate::orchestrator::{run_once, RunError, RunOptions, RunRecord, MISSING_CODE_SENTENCE};
use crate::reporting::{self, ReportError};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BASELINE: i32 = 3;
pub const EXIT_PROVIDER: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_INTERRUPTED: i32 = 130;

#[derive(Debug, Parser)]
#[command(name = "optloop", version, about = "Iterative LLM-guided optimization driven by compiler remarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute the configured number of optimization runs and summarize them.
    Run(RunArgs),
    /// Parse a compiler optimization report and print the diagnostics.
    ParseReport(ParseReportArgs),
    /// Print one rendered prompt of the configured prompt set.
    RenderPrompt(RenderPromptArgs),
    /// Rebuild summary.json / summary.md from existing run records.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub iterations: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub runs: Option<u32>,
    /// openai-compatible, anthropic-compatible or replay
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Runs executed at once. Anything above 1 makes timings noisy.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DialectArg {
    Clang,
    Gcc,
}

impl From<DialectArg> for ReportDialect {
    fn from(d: DialectArg) -> Self {
        match d {
            DialectArg::Clang => ReportDialect::ClangRpass,
            DialectArg::Gcc => ReportDialect::GccOptinfo,
        }
    }
}

#[derive(Debug, Args)]
pub struct ParseReportArgs {
    pub file: PathBuf,
    #[arg(long, value_enum, default_value_t = DialectArg::Clang)]
    pub dialect: DialectArg,
}

#[derive(Debug, Args)]
pub struct RenderPromptArgs {
    /// Without a config the built-in prompt set is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// context, first, success, compile_error, test_failure or missing_code
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub code: Option<String>,
    #[arg(long)]
    pub report: Option<String>,
    #[arg(long)]
    pub scoreint: Option<u64>,
    #[arg(long)]
    pub compilerfamily: Option<String>,
    /// Fill every value not given explicitly with a placeholder sample.
    #[arg(long)]
    pub sample: bool,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: RunError,
    },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("writing output: {0}")]
    Output(#[source] io::Error),
}

/// Failure class of a run error.
pub fn run_error_exit_code(e: &RunError) -> i32 {
    match e {
        RunError::BaselineCompileFailed(_) | RunError::BaselineTestsFailed(_) => EXIT_BASELINE,
        RunError::Provider(_) => EXIT_PROVIDER,
        RunError::Io { .. } => EXIT_IO,
        // The configuration names an executable or a region that does not exist.
        RunError::Compiler(CompilerError::ExecutableNotFound(_))
        | RunError::Harness(EvalError::HarnessNotFound(_))
        | RunError::Harness(EvalError::Compiler(CompilerError::ExecutableNotFound(_)))
        | RunError::Source(_) => EXIT_CONFIG,
        RunError::Compiler(_) | RunError::Harness(_) | RunError::Render(_) | RunError::Conversation(_) => {
            EXIT_OTHER
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Run { source, .. } => run_error_exit_code(source),
            CliError::Report(ReportError::Io { .. } | ReportError::Json { .. }) => EXIT_IO,
            CliError::Report(_) | CliError::Render(_) => EXIT_OTHER,
            CliError::Io { .. } | CliError::Output(_) => EXIT_IO,
        }
    }
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => cmd_run(&a, out),
        Command::ParseReport(a) => cmd_parse_report(&a.file, a.dialect.into(), out),
        Command::RenderPrompt(a) => cmd_render_prompt(&a, out),
        Command::Summarize(a) => cmd_summarize(&a.out, out),
    }
}

/// Config with command-line overrides applied.
pub fn prepare_config(a: &RunArgs) -> Result<Config, CliError> {
    let mut config = load_config(&a.config)?;
    let provider_kind = match &a.provider {
        Some(k) => Some(ProviderKind::parse(k).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown provider kind {k:?}; expected openai-compatible, anthropic-compatible or replay"
            ))
        })?),
        None => None,
    };
    config.apply_overrides(&Overrides {
        iterations: a.iterations,
        runs: a.runs,
        provider_kind,
        replay_file: a.replay.clone(),
        out_dir: a.out.clone(),
    })?;
    Ok(config)
}

/// Executes runs `1..=runs` with at most `jobs` at a time. Results come back in run order.
pub fn execute_runs(config: &Config, jobs: usize) -> Vec<(usize, Result<RunRecord, RunError>)> {
    let runs = config.loop_spec.runs as usize;
    let workers = jobs.clamp(1, runs.max(1));
    let opts = RunOptions { concurrent: workers > 1 };
    if workers == 1 {
        let mut results = Vec::new();
        for r in 1..=runs {
            let res = run_once(config, r, opts);
            let failed = res.is_err();
            results.push((r, res));
            if failed {
                break;
            }
        }
        return results;
    }
    let next = AtomicUsize::new(1);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::SeqCst);
                if r > runs {
                    break;
                }
                let res = run_once(config, r, opts);
                results.lock().unwrap_or_else(|p| p.into_inner()).push((r, res));
            });
        }
    });
    let mut results = results.into_inner().unwrap_or_else(|p| p.into_inner());
    results.sort_by_key(|(r, _)| *r);
    results
}

fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = prepare_config(a)?;
    fs::create_dir_all(&config.out_dir).map_err(|source| CliError::Io {
        path: config.out_dir.clone(),
        source,
    })?;
    if a.jobs > 1 && config.loop_spec.runs > 1 {
        warn!(jobs = a.jobs, "running concurrently; timing results will be noisy");
    }
    let mut records = Vec::new();
    let mut first_error = None;
    for (r, res) in execute_runs(&config, a.jobs as usize) {
        match res {
            Ok(rec) => {
                info!(run = r, baseline_ms = rec.baseline_score_ms, best_ms = rec.best_score_ms, "run finished");
                records.push(rec);
            }
            Err(e) => {
                error!(run = r, "{e}");
                first_error.get_or_insert(CliError::Run { run: r, source: e });
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    let summary = reporting::aggregate(&records)?;
    let (json, _) = reporting::write_summary(&summary, &config.out_dir)?;
    writeln!(out, "| Max | Avg | Num |\n|-----|-----|-----|\n{}", reporting::table_row(&summary))
        .map_err(CliError::Output)?;
    writeln!(out, "summary written to {}", json.display()).map_err(CliError::Output)?;
    Ok(())
}

pub fn cmd_parse_report(file: &Path, dialect: ReportDialect, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = fs::read(file).map_err(|source| CliError::Io {
        path: file.to_path_buf(),
        source,
    })?;
    let parsed = parse_report(&String::from_utf8_lossy(&bytes), dialect);
    let mut text = String::new();
    for d in &parsed.diagnostics {
        text.push_str(&d.render());
        text.push('\n');
    }
    text.push_str(&format!(
        "parsed {} diagnostics, discarded {} lines\n",
        parsed.diagnostics.len(),
        parsed.discarded_lines
    ));
    out.write_all(text.as_bytes()).map_err(CliError::Output)
}

const SAMPLE_CODE: &str = "for (int i = 0; i < n; ++i)\n  a[i] += b[i];";
const SAMPLE_REPORT: &str = "kernel.cc:1:1: remark: loop not vectorized [loop-vectorize]";
const SAMPLE_SCORE: u64 = 1000;

fn cmd_render_prompt(a: &RenderPromptArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (prompts, family) = match &a.config {
        Some(path) => {
            let config = load_config(path)?;
            let family = config.compiler.family_name();
            (config.prompts, family)
        }
        None => (PromptSet::default(), "Clang".to_string()),
    };
    let sample = |given: &Option<String>, fallback: &str| {
        given.clone().or_else(|| a.sample.then(|| fallback.to_string()))
    };
    let ctx = PromptContext {
        code: sample(&a.code, SAMPLE_CODE),
        report: sample(&a.report, SAMPLE_REPORT),
        scoreint: a.scoreint.or(a.sample.then_some(SAMPLE_SCORE)),
        compilerfamily: sample(&a.compilerfamily, &family),
    };
    let text = if a.kind == "missing_code" {
        format!("{MISSING_CODE_SENTENCE}\n\n{}", render_prompt(&prompts.success, &ctx)?)
    } else {
        let template = prompts
            .by_id(&a.kind)
            .ok_or_else(|| CliError::Usage(format!("unknown prompt kind {:?}", a.kind)))?;
        render_prompt(template, &ctx)?
    };
    writeln!(out, "{text}").map_err(CliError::Output)
}

fn cmd_summarize(dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let records = reporting::load_run_records(dir)?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("no run*/record.json files under {}", dir.display())));
    }
    let summary = reporting::aggregate(&records)?;
    reporting::write_summary(&summary, dir)?;
    writeln!(out, "| Max | Avg | Num |\n|-----|-----|-----|\n{}", reporting::table_row(&summary))
        .map_err(CliError::Output)
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match dispatch(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
