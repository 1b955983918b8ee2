//! Candidate evaluation: compile, build, then run the user harness.
//!
//! The harness contract is its exit status plus a `SCORE: <ms>` line on
//! stdout. Everything else it prints is forwarded verbatim to the model when
//! the candidate fails.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::CompilerSpec;
use crate::optreport::{self, CompileEnv, CompileMode, CompilerError, CompilerRun};
use crate::process::{self, Invocation, SpawnError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessSpec {
    pub command: Vec<String>,
    pub timeout_seconds: f64,
}

impl HarnessSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.command.is_empty() || self.command[0].trim().is_empty() {
            out.push("harness.command is non-empty".into());
        }
        if !(self.timeout_seconds > 0.0) {
            out.push("harness.timeout_seconds > 0".into());
        }
        out
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_seconds)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum EvalResult {
    CompileFailed { messages: String },
    TestsFailed { messages: String },
    Passed { score_ms: u64 },
}

impl EvalResult {
    pub fn score(&self) -> Option<u64> {
        match self {
            EvalResult::Passed { score_ms } => Some(*score_ms),
            _ => None,
        }
    }

    pub fn is_passed(&self) -> bool {
        matches!(self, EvalResult::Passed { .. })
    }

    pub fn outcome(&self) -> &'static str {
        match self {
            EvalResult::CompileFailed { .. } => "compile_failed",
            EvalResult::TestsFailed { .. } => "tests_failed",
            EvalResult::Passed { .. } => "passed",
        }
    }

    pub fn messages(&self) -> Option<&str> {
        match self {
            EvalResult::CompileFailed { messages } | EvalResult::TestsFailed { messages } => Some(messages),
            EvalResult::Passed { .. } => None,
        }
    }

    /// Plain-text form written to `eval.txt`.
    pub fn describe(&self) -> String {
        match self {
            EvalResult::Passed { score_ms } => format!("passed\nscore_ms: {score_ms}\n"),
            EvalResult::CompileFailed { messages } => format!("compile_failed\n\n{messages}\n"),
            EvalResult::TestsFailed { messages } => format!("tests_failed\n\n{messages}\n"),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Compiler(#[from] CompilerError),
    #[error("harness executable not found: {0}")]
    HarnessNotFound(String),
    #[error("cannot run harness: {0}")]
    Harness(SpawnError),
}

fn score_pattern() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"^SCORE:\s*(\d+)(?:\.\d*)?\s*$").unwrap())
}

/// Last `SCORE: <n>` line on stdout, fractional part truncated.
pub fn parse_score(stdout: &str) -> Option<u64> {
    stdout
        .lines()
        .filter_map(|l| score_pattern().captures(l))
        .filter_map(|c| c[1].parse::<u64>().ok())
        .last()
}

/// Keeps the last `budget` characters, where compilers and tests usually put the decisive error.
pub fn tail_truncate(text: &str, budget: usize) -> String {
    let n = text.chars().count();
    if n <= budget {
        return text.to_string();
    }
    text.chars().skip(n - budget).collect()
}

fn failure_text(run: &CompilerRun) -> String {
    let out = run.output();
    let out = out.trim_end();
    if out.is_empty() {
        format!(
            "compiler exited with status {} and produced no output",
            run.exit_status
        )
    } else {
        out.to_string()
    }
}

/// Syntax check only. `Ok(None)` means the source compiles.
pub fn compile_check(
    compiler: &CompilerSpec,
    source: &Path,
    env: &CompileEnv,
) -> Result<Option<EvalResult>, CompilerError> {
    let run = optreport::run_compiler(compiler, source, CompileMode::SyntaxCheck, env)?;
    if run.succeeded() {
        Ok(None)
    } else {
        Ok(Some(EvalResult::CompileFailed {
            messages: failure_text(&run),
        }))
    }
}

/// Runs the harness in `workdir`. Classification needs only exit status and stdout.
pub fn run_harness(
    spec: &HarnessSpec,
    workdir: &Path,
    env: &[(String, String)],
) -> Result<EvalResult, EvalError> {
    let captured = process::run(&Invocation {
        argv: &spec.command,
        cwd: Some(workdir),
        env,
        timeout: spec.timeout(),
    })
    .map_err(|e| match e {
        SpawnError::ExecutableNotFound(p) => EvalError::HarnessNotFound(p),
        other => EvalError::Harness(other),
    })?;
    if captured.timed_out {
        return Ok(EvalResult::TestsFailed {
            messages: format!("harness timed out after {} seconds", spec.timeout_seconds),
        });
    }
    Ok(classify_harness(captured.exit_status, &captured.stdout, &captured.stderr))
}

pub fn classify_harness(exit_status: Option<i32>, stdout: &str, stderr: &str) -> EvalResult {
    let score = parse_score(stdout);
    match (exit_status, score) {
        (Some(0), Some(score_ms)) => EvalResult::Passed { score_ms },
        (Some(0), None) => EvalResult::TestsFailed {
            messages: "harness passed but emitted no SCORE line".into(),
        },
        (status, _) => {
            let mut combined = stdout.to_string();
            combined.push_str(stderr);
            let combined = combined.trim_end();
            let messages = if !combined.is_empty() {
                combined.to_string()
            } else {
                match status {
                    Some(code) => format!("harness exited with status {code} and produced no output"),
                    None => "harness was terminated by a signal and produced no output".into(),
                }
            };
            EvalResult::TestsFailed { messages }
        }
    }
}

/// Everything a candidate evaluation needs besides the compiler and harness settings.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub compile: CompileEnv,
    /// Candidate file name relative to `compile.workdir`.
    pub source_name: PathBuf,
    pub harness_env: Vec<(String, String)>,
}

impl Workspace {
    pub fn source_path(&self) -> PathBuf {
        self.compile.workdir.join(&self.source_name)
    }
}

/// Syntax check, optimized build, then the harness; the harness never runs for a
/// candidate that does not compile.
pub fn evaluate(
    compiler: &CompilerSpec,
    harness: &HarnessSpec,
    ws: &Workspace,
) -> Result<EvalResult, EvalError> {
    let timed_out = |limit: Duration| EvalResult::CompileFailed {
        messages: format!("compiler timed out after {} seconds", limit.as_secs()),
    };
    match compile_check(compiler, &ws.source_name, &ws.compile) {
        Ok(Some(failed)) => return Ok(failed),
        Ok(None) => {}
        Err(CompilerError::Timeout(limit)) => return Ok(timed_out(limit)),
        Err(e) => return Err(e.into()),
    }
    match optreport::run_compiler(compiler, &ws.source_name, CompileMode::Build, &ws.compile) {
        Ok(run) if !run.succeeded() => {
            return Ok(EvalResult::CompileFailed {
                messages: failure_text(&run),
            })
        }
        Ok(_) => {}
        Err(CompilerError::Timeout(limit)) => return Ok(timed_out(limit)),
        Err(e) => return Err(e.into()),
    }
    run_harness(harness, &ws.compile.workdir, &ws.harness_env)
}
