//! Optimization report acquisition and parsing.
//!
//! Both Clang (`-Rpass-missed=.`) and GCC (`-fopt-info-missed`) write their
//! remarks to stderr as `FILE:LINE:COL: SEVERITY: MESSAGE`, optionally
//! followed by a source echo and a caret line. The parser is total: anything
//! it does not recognize is dropped and counted.

use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CompilerFamily, CompilerSpec};
use crate::process::{self, Invocation, SpawnError};
use crate::source::LineSpan;

pub const DEFAULT_COMPILER_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Remark,
    Missed,
    Note,
    Warning,
    Error,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Remark => "remark",
            Severity::Missed => "missed",
            Severity::Note => "note",
            Severity::Warning => "warning",
            Severity::Error => "error",
        }
    }

    fn from_word(word: &str) -> Option<Self> {
        Some(match word {
            "remark" => Severity::Remark,
            "missed" => Severity::Missed,
            "note" => Severity::Note,
            "warning" => Severity::Warning,
            "error" | "fatal error" => Severity::Error,
            _ => return None,
        })
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: String,
    pub line: usize,
    pub column: usize,
    pub severity: Severity,
    pub pass_name: Option<String>,
    pub message: String,
    pub context_lines: Vec<String>,
}

impl Diagnostic {
    /// The packed single-line form `FILE:LINE:COL: SEVERITY: MESSAGE [PASS]`, without terminator.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{}:{}:{}: {}: {}",
            self.file, self.line, self.column, self.severity, self.message
        );
        if let Some(pass) = &self.pass_name {
            s.push_str(" [");
            s.push_str(pass);
            s.push(']');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportDialect {
    ClangRpass,
    GccOptinfo,
}

impl ReportDialect {
    /// Families other than GCC emit Clang-shaped diagnostics or none at all.
    pub fn for_family(family: CompilerFamily) -> Self {
        match family {
            CompilerFamily::Gcc => ReportDialect::GccOptinfo,
            CompilerFamily::Clang | CompilerFamily::Other => ReportDialect::ClangRpass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedReport {
    pub diagnostics: Vec<Diagnostic>,
    pub discarded_lines: usize,
}

struct Patterns {
    clang: Regex,
    gcc: Regex,
    pass_tag: Regex,
    numbered_echo: Regex,
    gutter: Regex,
    bare_caret: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        clang: Regex::new(
            r"^(?P<file>\S.*?):(?P<line>\d+):(?P<col>\d+): (?P<sev>remark|warning|error|fatal error|note): (?P<msg>.*)$",
        )
        .unwrap(),
        gcc: Regex::new(r"^(?P<file>\S.*?):(?P<line>\d+):(?P<col>\d+): (?P<sev>missed|note): (?P<msg>.*)$")
            .unwrap(),
        pass_tag: Regex::new(r"\s*\[(?P<flag>-Rpass(?:-missed|-analysis)?)=(?P<pass>[^\]\s]+)\]$").unwrap(),
        numbered_echo: Regex::new(r"^\s*\d+\s*\|").unwrap(),
        gutter: Regex::new(r"^\s*\|").unwrap(),
        bare_caret: Regex::new(r"^[ \t~]*\^[ \t~^]*$").unwrap(),
    })
}

fn parse_header(line: &str, dialect: ReportDialect) -> Option<Diagnostic> {
    let p = patterns();
    let re = match dialect {
        ReportDialect::ClangRpass => &p.clang,
        ReportDialect::GccOptinfo => &p.gcc,
    };
    let caps = re.captures(line)?;
    let line_no: usize = caps["line"].parse().ok()?;
    let column: usize = caps["col"].parse().ok()?;
    if line_no == 0 || column == 0 {
        return None;
    }
    let mut severity = Severity::from_word(&caps["sev"])?;
    let mut message = caps["msg"].to_string();
    let mut pass_name = None;
    if dialect == ReportDialect::ClangRpass {
        if let Some(tag) = p.pass_tag.captures(&message) {
            // The flag channel carries the meaning, not the leading word.
            if &tag["flag"] == "-Rpass-missed" {
                severity = Severity::Missed;
            }
            pass_name = Some(tag["pass"].to_string());
            let cut = tag.get(0).unwrap().start();
            message.truncate(cut);
        }
    }
    let message = message.trim_end().to_string();
    if message.is_empty() {
        return None;
    }
    Some(Diagnostic {
        file: caps["file"].to_string(),
        line: line_no,
        column,
        severity,
        pass_name,
        message,
        context_lines: Vec::new(),
    })
}

/// Parses compiler output into diagnostics, in input order.
///
/// Source-echo and caret lines attach to the diagnostic they follow. Older
/// Clang releases echo the source line without a line-number gutter; such a
/// line is attached only when a caret line follows it directly.
pub fn parse_report(text: &str, dialect: ReportDialect) -> ParsedReport {
    let p = patterns();
    let mut out = ParsedReport::default();
    // true while the last accepted line belongs to the last diagnostic
    let mut open = false;
    let mut pending_echo: Option<&str> = None;

    for line in text.lines() {
        if let Some(d) = parse_header(line, dialect) {
            if pending_echo.take().is_some() {
                out.discarded_lines += 1;
            }
            out.diagnostics.push(d);
            open = true;
            continue;
        }
        if open {
            let is_context = p.numbered_echo.is_match(line) || p.gutter.is_match(line);
            let is_caret = p.bare_caret.is_match(line);
            let last = out.diagnostics.last_mut().expect("open implies a diagnostic");
            if is_context || (is_caret && pending_echo.is_none()) {
                if pending_echo.take().is_some() {
                    out.discarded_lines += 1;
                }
                last.context_lines.push(line.to_string());
                continue;
            }
            if is_caret {
                last.context_lines.push(pending_echo.take().unwrap().to_string());
                last.context_lines.push(line.to_string());
                continue;
            }
            if pending_echo.is_none() && !line.trim().is_empty() {
                pending_echo = Some(line);
                continue;
            }
        }
        if pending_echo.take().is_some() {
            out.discarded_lines += 1;
        }
        open = false;
        if !line.trim().is_empty() {
            out.discarded_lines += 1;
        }
    }
    if pending_echo.is_some() {
        out.discarded_lines += 1;
    }
    out
}

fn normal_components(p: &Path) -> Vec<Component<'_>> {
    p.components().filter(|c| !matches!(c, Component::CurDir)).collect()
}

/// True when one path is a component-wise suffix of the other.
pub fn same_file(diag_file: &str, target_file: &str) -> bool {
    let a = normal_components(Path::new(diag_file));
    let b = normal_components(Path::new(target_file));
    if a.is_empty() || b.is_empty() {
        return false;
    }
    let n = a.len().min(b.len());
    a[a.len() - n..] == b[b.len() - n..]
}

/// Keeps diagnostics in `target_file` whose line lies in `region`. Line numbers are left as-is.
pub fn filter_by_region(diags: &[Diagnostic], region: LineSpan, target_file: &str) -> Vec<Diagnostic> {
    diags
        .iter()
        .filter(|d| region.contains(d.line) && same_file(&d.file, target_file))
        .cloned()
        .collect()
}

pub fn omission_line(omitted: usize) -> String {
    format!("... ({omitted} more diagnostics omitted)\n")
}

/// Renders the longest prefix of `diags` that fits in `budget_chars` characters.
pub fn pack_report(diags: &[Diagnostic], budget_chars: usize) -> String {
    let mut out = String::new();
    let mut used = 0usize;
    for (i, d) in diags.iter().enumerate() {
        let mut line = d.render();
        line.push('\n');
        let len = line.chars().count();
        if used + len > budget_chars {
            out.push_str(&omission_line(diags.len() - i));
            return out;
        }
        used += len;
        out.push_str(&line);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompileMode {
    /// `opt_flags` + `report_flags`, compile to an object, no link.
    Report,
    /// `syntax_check_flags` only.
    SyntaxCheck,
    /// `opt_flags`, object written to `<stem>.o` for the harness.
    Build,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompilerRun {
    pub exit_status: i32,
    pub stdout: String,
    pub stderr: String,
    pub command_line: Vec<String>,
}

impl CompilerRun {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0
    }

    pub fn output(&self) -> String {
        let mut s = self.stderr.clone();
        s.push_str(&self.stdout);
        s
    }
}

#[derive(Debug, Error)]
pub enum CompilerError {
    #[error("compiler executable not found: {0}")]
    ExecutableNotFound(String),
    #[error("compiler timed out after {} seconds", .0.as_secs())]
    Timeout(Duration),
    #[error(transparent)]
    Spawn(SpawnError),
}

/// Where and how a compiler is run.
#[derive(Debug, Clone)]
pub struct CompileEnv {
    pub workdir: PathBuf,
    pub include_dirs: Vec<PathBuf>,
    pub timeout: Duration,
}

pub fn object_path(source: &Path, mode: CompileMode) -> PathBuf {
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("candidate");
    let name = match mode {
        CompileMode::Report => format!("{stem}.report.o"),
        _ => format!("{stem}.o"),
    };
    source.with_file_name(name)
}

pub fn compiler_argv(spec: &CompilerSpec, source: &Path, mode: CompileMode, include_dirs: &[PathBuf]) -> Vec<String> {
    let mut argv = vec![spec.command.clone()];
    match mode {
        CompileMode::Report => {
            argv.extend(spec.opt_flags.iter().cloned());
            argv.extend(spec.report_flags.iter().cloned());
        }
        CompileMode::SyntaxCheck => argv.extend(spec.syntax_check_flags.iter().cloned()),
        CompileMode::Build => argv.extend(spec.opt_flags.iter().cloned()),
    }
    argv.extend(include_dirs.iter().map(|d| format!("-I{}", d.display())));
    let src = source.display().to_string();
    match mode {
        CompileMode::SyntaxCheck => argv.push(src),
        CompileMode::Report | CompileMode::Build => {
            argv.push("-c".into());
            argv.push(src);
            argv.push("-o".into());
            argv.push(object_path(source, mode).display().to_string());
        }
    }
    argv
}

/// Runs the compiler once. A nonzero exit is data, not an error.
pub fn run_compiler(
    spec: &CompilerSpec,
    source: &Path,
    mode: CompileMode,
    env: &CompileEnv,
) -> Result<CompilerRun, CompilerError> {
    let argv = compiler_argv(spec, source, mode, &env.include_dirs);
    let captured = process::run(&Invocation {
        argv: &argv,
        cwd: Some(&env.workdir),
        env: &[],
        timeout: env.timeout,
    })
    .map_err(|e| match e {
        SpawnError::ExecutableNotFound(p) => CompilerError::ExecutableNotFound(p),
        other => CompilerError::Spawn(other),
    })?;
    if captured.timed_out {
        return Err(CompilerError::Timeout(env.timeout));
    }
    Ok(CompilerRun {
        exit_status: captured.exit_status.unwrap_or(-1),
        stdout: captured.stdout,
        stderr: captured.stderr,
        command_line: argv,
    })
}
