//! Driver configuration: one TOML file binding compiler, target, harness,
//! provider, loop parameters and the five prompt templates.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Prompt values starting with `@` name a file whose contents become
//! the template text.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::HarnessSpec;
use crate::llm::{ProviderKind, ProviderSpec};
use crate::source::Region;

pub const DEFAULT_ITERATIONS: u32 = 6;
pub const DEFAULT_RUNS: u32 = 5;
pub const DEFAULT_REPORT_CHAR_BUDGET: usize = 6000;
pub const MIN_REPORT_CHAR_BUDGET: usize = 256;
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 4096;
pub const DEFAULT_HARNESS_TIMEOUT_SECONDS: f64 = 600.0;
pub const DEFAULT_OUT_DIR: &str = "optloop-out";

pub const DEFAULT_CONTEXT_PROMPT: &str =
    "You are an expert in C++ compiler optimizations and code performance tuning for modern Intel x86.";

const TASKS_BODY: &str = "Your goal is to focus on high-impact optimizations that significantly reduce execution time. Follow these tasks carefully:\n\
Task 1: Report Analysis - Analyze the optimization report and extract a prioritized list of the top 3 issues that are most likely to have a significant impact on performance.- Focus on issues that are directly related to execution time bottlenecks or critical paths in the code.\n\
Task 2: Code Analysis - Based on the extracted prioritized list, select the single highest-impact issue. Identify the specific code segments that are directly related to this issue. Do not suggest changes to unrelated or low-impact parts of the code.\n\
Task 3: Code Improvement - Rewrite only the identified code segments from Task 2 to address the selected issue and enable better compiler optimizations. Ensure the rewritten code is functionally equivalent to the original code. Return the entire code in a single code block.";

pub fn default_first_prompt() -> String {
    format!(
        "You are provided with the following code snippet:\n```\n{{code}}\n```\nThe execution time for 10 runs of the code is {{scoreint}} milliseconds. The compiler, {{compilerfamily}}, has generated the following optimization report:\n{{report}}\n{TASKS_BODY}"
    )
}

pub fn default_success_prompt() -> String {
    format!(
        "The execution time for 10 runs of the latest code is {{scoreint}} milliseconds. The compiler, {{compilerfamily}}, has generated the following optimization report:\n{{report}}\n{TASKS_BODY}"
    )
}

pub const DEFAULT_COMPILE_ERROR_PROMPT: &str =
    "This version did not compile. Here are the error messages:\n{report}\nTry again.";
pub const DEFAULT_TEST_FAILURE_PROMPT: &str =
    "This version failed the regression tests. Here are the error messages:\n{report}\nTry again.";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("unknown placeholder {{{name}}} in prompt '{template}'")]
    UnknownPlaceholder { name: String, template: String },
    #[error("cannot serialize config: {0}")]
    Serialize(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RenderError {
    #[error("missing value for placeholder {{{0}}}")]
    MissingVariable(String),
    #[error("unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompilerFamily {
    Clang,
    Gcc,
    Other,
}

impl CompilerFamily {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "clang" => Some(Self::Clang),
            "gcc" => Some(Self::Gcc),
            "other" => Some(Self::Other),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clang => "clang",
            Self::Gcc => "gcc",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for CompilerFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompilerSpec {
    pub family: CompilerFamily,
    pub command: String,
    pub opt_flags: Vec<String>,
    pub report_flags: Vec<String>,
    pub syntax_check_flags: Vec<String>,
}

impl CompilerSpec {
    pub fn with_defaults(family: CompilerFamily, command: impl Into<String>) -> Self {
        let opt_flags = match family {
            CompilerFamily::Other => vec![],
            _ => ["-O3", "-march=native", "-DNDEBUG=1"].map(String::from).to_vec(),
        };
        Self {
            family,
            command: command.into(),
            opt_flags,
            report_flags: default_report_flags(family),
            syntax_check_flags: vec!["-fsyntax-only".into()],
        }
    }

    /// Name substituted for `{compilerfamily}`.
    pub fn family_name(&self) -> String {
        match self.family {
            CompilerFamily::Clang => "Clang".into(),
            CompilerFamily::Gcc => "GCC".into(),
            CompilerFamily::Other => Path::new(&self.command)
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.command.clone()),
        }
    }

    fn violations(&self, out: &mut Vec<String>) {
        if self.command.trim().is_empty() {
            out.push("compiler.command is non-empty".into());
        }
        if self.family != CompilerFamily::Other && self.report_flags.is_empty() {
            out.push(format!("compiler.report_flags is non-empty for family {}", self.family));
        }
    }
}

fn default_report_flags(family: CompilerFamily) -> Vec<String> {
    match family {
        CompilerFamily::Clang => vec!["-Rpass-missed=.".into()],
        CompilerFamily::Gcc => vec!["-fopt-info-missed".into(), "-fopt-info-vec-missed".into()],
        CompilerFamily::Other => vec![],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSpec {
    pub source_path: PathBuf,
    pub region: Region,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnMissingCodeBlock {
    FailIteration,
    Reprompt,
}

impl OnMissingCodeBlock {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "fail_iteration" => Some(Self::FailIteration),
            "reprompt" => Some(Self::Reprompt),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::FailIteration => "fail_iteration",
            Self::Reprompt => "reprompt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopSpec {
    pub iterations: u32,
    pub runs: u32,
    pub report_char_budget: usize,
    pub on_missing_code_block: OnMissingCodeBlock,
}

impl Default for LoopSpec {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            runs: DEFAULT_RUNS,
            report_char_budget: DEFAULT_REPORT_CHAR_BUDGET,
            on_missing_code_block: OnMissingCodeBlock::FailIteration,
        }
    }
}

impl LoopSpec {
    fn violations(&self, out: &mut Vec<String>) {
        if self.iterations < 1 {
            out.push("iterations ≥ 1".into());
        }
        if self.runs < 1 {
            out.push("runs ≥ 1".into());
        }
        if self.report_char_budget < MIN_REPORT_CHAR_BUDGET {
            out.push(format!("report_char_budget ≥ {MIN_REPORT_CHAR_BUDGET}"));
        }
    }
}

/// The four names a template may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placeholder {
    Code,
    Report,
    ScoreInt,
    CompilerFamily,
}

impl Placeholder {
    pub const ALL: [Placeholder; 4] = [Self::Code, Self::Report, Self::ScoreInt, Self::CompilerFamily];

    pub fn name(self) -> &'static str {
        match self {
            Self::Code => "code",
            Self::Report => "report",
            Self::ScoreInt => "scoreint",
            Self::CompilerFamily => "compilerfamily",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

enum Segment<'a> {
    Literal(&'a str),
    Brace,
    Var(&'a str),
}

/// Splits template text into literals, escaped braces and `{name}` references.
fn segments(text: &str) -> Vec<Segment<'_>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        if bytes.get(i + 1) == Some(&b'{') {
            out.push(Segment::Literal(&text[lit_start..i]));
            out.push(Segment::Brace);
            i += 2;
            lit_start = i;
            continue;
        }
        let name_start = i + 1;
        let mut j = name_start;
        while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
            j += 1;
        }
        let is_ident = j > name_start && !bytes[name_start].is_ascii_digit();
        if is_ident && bytes.get(j) == Some(&b'}') {
            out.push(Segment::Literal(&text[lit_start..i]));
            out.push(Segment::Var(&text[name_start..j]));
            i = j + 1;
            lit_start = i;
        } else {
            i += 1;
        }
    }
    out.push(Segment::Literal(&text[lit_start..]));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    /// Names referenced as `{name}`, in order of first appearance.
    pub fn placeholder_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for seg in segments(&self.text) {
            if let Segment::Var(n) = seg {
                if !names.contains(&n) {
                    names.push(n);
                }
            }
        }
        names
    }

    pub fn uses(&self, p: Placeholder) -> bool {
        self.placeholder_names().contains(&p.name())
    }

    fn check_names(&self, template_id: &str) -> Result<(), ConfigError> {
        match self
            .placeholder_names()
            .into_iter()
            .find(|n| Placeholder::from_name(n).is_none())
        {
            Some(name) => Err(ConfigError::UnknownPlaceholder {
                name: name.to_string(),
                template: template_id.to_string(),
            }),
            None => Ok(()),
        }
    }
}

/// Values available to a template. Unset values only matter if the template asks for them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptContext {
    pub code: Option<String>,
    pub report: Option<String>,
    pub scoreint: Option<u64>,
    pub compilerfamily: Option<String>,
}

impl PromptContext {
    fn value(&self, p: Placeholder) -> Option<String> {
        match p {
            Placeholder::Code => self.code.clone(),
            Placeholder::Report => self.report.clone(),
            Placeholder::ScoreInt => self.scoreint.map(|s| s.to_string()),
            Placeholder::CompilerFamily => self.compilerfamily.clone(),
        }
    }
}

/// Substitutes every `{name}` in one pass; values are inserted verbatim and never re-scanned.
pub fn render_prompt(template: &PromptTemplate, ctx: &PromptContext) -> Result<String, RenderError> {
    let mut out = String::with_capacity(template.text.len());
    for seg in segments(&template.text) {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Brace => out.push('{'),
            Segment::Var(name) => {
                let p = Placeholder::from_name(name)
                    .ok_or_else(|| RenderError::UnknownPlaceholder(name.to_string()))?;
                let v = ctx
                    .value(p)
                    .ok_or_else(|| RenderError::MissingVariable(name.to_string()))?;
                out.push_str(&v);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub context: PromptTemplate,
    pub first: PromptTemplate,
    pub success: PromptTemplate,
    pub compile_error: PromptTemplate,
    pub test_failure: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            context: PromptTemplate::new(DEFAULT_CONTEXT_PROMPT),
            first: PromptTemplate::new(default_first_prompt()),
            success: PromptTemplate::new(default_success_prompt()),
            compile_error: PromptTemplate::new(DEFAULT_COMPILE_ERROR_PROMPT),
            test_failure: PromptTemplate::new(DEFAULT_TEST_FAILURE_PROMPT),
        }
    }
}

impl PromptSet {
    pub fn by_id(&self, id: &str) -> Option<&PromptTemplate> {
        Some(match id {
            "context" => &self.context,
            "first" => &self.first,
            "success" => &self.success,
            "compile_error" => &self.compile_error,
            "test_failure" => &self.test_failure,
            _ => return None,
        })
    }

    fn entries(&self) -> [(&'static str, &PromptTemplate); 5] {
        [
            ("context", &self.context),
            ("first", &self.first),
            ("success", &self.success),
            ("compile_error", &self.compile_error),
            ("test_failure", &self.test_failure),
        ]
    }

    fn check_names(&self) -> Result<(), ConfigError> {
        self.entries().iter().try_for_each(|(id, t)| t.check_names(id))
    }

    fn violations(&self, out: &mut Vec<String>) {
        for (id, t) in [("compile_error", &self.compile_error), ("test_failure", &self.test_failure)] {
            if !t.uses(Placeholder::Report) {
                out.push(format!("prompts.{id} contains the {{report}} placeholder"));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub compiler: CompilerSpec,
    pub target: TargetSpec,
    pub harness: HarnessSpec,
    pub provider: ProviderSpec,
    pub loop_spec: LoopSpec,
    pub prompts: PromptSet,
    pub out_dir: PathBuf,
}

impl Config {
    /// Every violated invariant, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.compiler.violations(&mut out);
        if fs::File::open(&self.target.source_path).is_err() {
            out.push(format!(
                "target.source refers to a readable file ({})",
                self.target.source_path.display()
            ));
        }
        out.extend(self.target.region.violations());
        out.extend(self.harness.violations());
        out.extend(self.provider.violations());
        self.loop_spec.violations(&mut out);
        self.prompts.violations(&mut out);
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation(v))
        }
    }

    /// Applies command-line overrides and re-validates.
    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(n) = o.iterations {
            self.loop_spec.iterations = n;
        }
        if let Some(n) = o.runs {
            self.loop_spec.runs = n;
        }
        if let Some(kind) = o.provider_kind {
            self.provider.kind = kind;
        }
        if let Some(f) = &o.replay_file {
            self.provider.replay_file = Some(f.clone());
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        self.validate()
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(&RawConfig::from(self)).map_err(|e| ConfigError::Serialize(e.to_string()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub iterations: Option<u32>,
    pub runs: Option<u32>,
    pub provider_kind: Option<ProviderKind>,
    pub replay_file: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<String>,
    compiler: Option<RawCompiler>,
    target: Option<RawTarget>,
    harness: Option<RawHarness>,
    provider: Option<RawProvider>,
    #[serde(rename = "loop")]
    loop_: Option<RawLoop>,
    prompts: Option<RawPrompts>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCompiler {
    family: Option<String>,
    command: Option<String>,
    opt_flags: Option<Vec<String>>,
    report_flags: Option<Vec<String>>,
    syntax_check_flags: Option<Vec<String>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    source: Option<String>,
    region: Option<RawRegion>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    start_line: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    end_line: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    begin_marker: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    end_marker: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum CommandValue {
    Line(String),
    Argv(Vec<String>),
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHarness {
    command: Option<CommandValue>,
    timeout_seconds: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProvider {
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    api_key_env: Option<String>,
    temperature: Option<f64>,
    max_tokens: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replay_file: Option<String>,
    price_per_million_input: Option<f64>,
    price_per_million_output: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoop {
    iterations: Option<i64>,
    runs: Option<i64>,
    report_char_budget: Option<i64>,
    on_missing_code_block: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrompts {
    context: Option<String>,
    first: Option<String>,
    success: Option<String>,
    compile_error: Option<String>,
    test_failure: Option<String>,
}

impl From<&Config> for RawConfig {
    fn from(c: &Config) -> Self {
        let region = match &c.target.region {
            Region::WholeFile => RawRegion {
                mode: Some("whole-file".into()),
                ..Default::default()
            },
            Region::Lines {
                start_line,
                end_line,
            } => RawRegion {
                mode: Some("lines".into()),
                start_line: Some(*start_line as i64),
                end_line: Some(*end_line as i64),
                ..Default::default()
            },
            Region::Markers {
                begin_marker,
                end_marker,
            } => RawRegion {
                mode: Some("markers".into()),
                begin_marker: Some(begin_marker.clone()),
                end_marker: Some(end_marker.clone()),
                ..Default::default()
            },
        };
        let p = &c.provider;
        RawConfig {
            out_dir: Some(c.out_dir.display().to_string()),
            compiler: Some(RawCompiler {
                family: Some(c.compiler.family.as_str().into()),
                command: Some(c.compiler.command.clone()),
                opt_flags: Some(c.compiler.opt_flags.clone()),
                report_flags: Some(c.compiler.report_flags.clone()),
                syntax_check_flags: Some(c.compiler.syntax_check_flags.clone()),
            }),
            target: Some(RawTarget {
                source: Some(c.target.source_path.display().to_string()),
                region: Some(region),
            }),
            harness: Some(RawHarness {
                command: Some(CommandValue::Argv(c.harness.command.clone())),
                timeout_seconds: Some(c.harness.timeout_seconds),
            }),
            provider: Some(RawProvider {
                kind: Some(p.kind.as_str().into()),
                endpoint: p.endpoint.clone(),
                model: p.model.clone(),
                api_key_env: p.api_key_env.clone(),
                temperature: Some(p.temperature),
                max_tokens: Some(p.max_tokens as i64),
                replay_file: p.replay_file.as_ref().map(|f| f.display().to_string()),
                price_per_million_input: Some(p.price_per_million_input),
                price_per_million_output: Some(p.price_per_million_output),
            }),
            loop_: Some(RawLoop {
                iterations: Some(c.loop_spec.iterations as i64),
                runs: Some(c.loop_spec.runs as i64),
                report_char_budget: Some(c.loop_spec.report_char_budget as i64),
                on_missing_code_block: Some(c.loop_spec.on_missing_code_block.as_str().into()),
            }),
            prompts: Some(RawPrompts {
                context: Some(escape_at(&c.prompts.context.text)),
                first: Some(escape_at(&c.prompts.first.text)),
                success: Some(escape_at(&c.prompts.success.text)),
                compile_error: Some(escape_at(&c.prompts.compile_error.text)),
                test_failure: Some(escape_at(&c.prompts.test_failure.text)),
            }),
        }
    }
}

/// Inline text that itself begins with `@` is written as `@@...`.
fn escape_at(text: &str) -> String {
    if text.starts_with('@') {
        format!("@{text}")
    } else {
        text.to_string()
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Command words that look like relative paths and exist next to the config become absolute.
fn resolve_command_word(base: &Path, word: &str) -> String {
    let path = Path::new(word);
    if path.is_relative() && (word.contains('/') || path.extension().is_some()) {
        let candidate = base.join(path);
        if candidate.exists() {
            return candidate.display().to_string();
        }
    }
    word.to_string()
}

fn to_count<T: TryFrom<i64>>(v: i64, key: &str, errs: &mut Vec<String>) -> Option<T> {
    match T::try_from(v) {
        Ok(x) => Some(x),
        Err(_) => {
            errs.push(format!("{key} must be a non-negative integer (got {v})"));
            None
        }
    }
}

pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ConfigError::FileNotFound(path.to_path_buf()))
        }
        Err(source) => {
            return Err(ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let base = base.canonicalize().unwrap_or(base);
    load_config_str(&text, &base)
}

/// Parses config text, resolving relative paths against `base_dir`.
pub fn load_config_str(text: &str, base_dir: &Path) -> Result<Config, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(0),
        reason: e.message().to_string(),
    })?;

    let mut errs = Vec::new();

    let compiler = match raw.compiler {
        None => {
            errs.push("compiler section is required".into());
            None
        }
        Some(rc) => {
            let family = match rc.family.as_deref() {
                None => {
                    errs.push("compiler.family is required".into());
                    None
                }
                Some(f) => {
                    let parsed = CompilerFamily::parse(f);
                    if parsed.is_none() {
                        errs.push(format!("compiler.family must be clang, gcc or other (got {f:?})"));
                    }
                    parsed
                }
            };
            family.map(|family| {
                let mut spec = CompilerSpec::with_defaults(
                    family,
                    rc.command
                        .map(|c| resolve_command_word(base_dir, &c))
                        .unwrap_or_default(),
                );
                if let Some(f) = rc.opt_flags {
                    spec.opt_flags = f;
                }
                if let Some(f) = rc.report_flags {
                    spec.report_flags = f;
                }
                if let Some(f) = rc.syntax_check_flags {
                    spec.syntax_check_flags = f;
                }
                spec
            })
        }
    };

    let target = match raw.target {
        None => {
            errs.push("target section is required".into());
            None
        }
        Some(rt) => {
            let source = rt.source.map(|s| resolve(base_dir, &s));
            if source.is_none() {
                errs.push("target.source is required".into());
            }
            let region = parse_region(rt.region.unwrap_or_default(), &mut errs);
            match (source, region) {
                (Some(source_path), Some(region)) => Some(TargetSpec {
                    source_path,
                    region,
                }),
                _ => None,
            }
        }
    };

    let harness = match raw.harness {
        None => {
            errs.push("harness section is required".into());
            None
        }
        Some(rh) => {
            let command: Vec<String> = match rh.command {
                None => vec![],
                Some(CommandValue::Line(l)) => l.split_whitespace().map(String::from).collect(),
                Some(CommandValue::Argv(v)) => v,
            };
            Some(HarnessSpec {
                command: command.iter().map(|w| resolve_command_word(base_dir, w)).collect(),
                timeout_seconds: rh.timeout_seconds.unwrap_or(DEFAULT_HARNESS_TIMEOUT_SECONDS),
            })
        }
    };

    let provider = match raw.provider {
        None => {
            errs.push("provider section is required".into());
            None
        }
        Some(rp) => {
            let kind = match rp.kind.as_deref() {
                None => {
                    errs.push("provider.kind is required".into());
                    None
                }
                Some(k) => {
                    let parsed = ProviderKind::parse(k);
                    if parsed.is_none() {
                        errs.push(format!(
                            "provider.kind must be openai_compatible, anthropic_compatible or replay (got {k:?})"
                        ));
                    }
                    parsed
                }
            };
            let max_tokens = match rp.max_tokens {
                Some(v) => to_count::<u32>(v, "provider.max_tokens", &mut errs),
                None => Some(DEFAULT_MAX_TOKENS),
            };
            match (kind, max_tokens) {
                (Some(kind), Some(max_tokens)) => Some(ProviderSpec {
                    kind,
                    endpoint: rp.endpoint,
                    model: rp.model,
                    api_key_env: rp.api_key_env,
                    temperature: rp.temperature.unwrap_or(DEFAULT_TEMPERATURE),
                    max_tokens,
                    replay_file: rp.replay_file.map(|f| resolve(base_dir, &f)),
                    price_per_million_input: rp.price_per_million_input.unwrap_or(0.0),
                    price_per_million_output: rp.price_per_million_output.unwrap_or(0.0),
                }),
                _ => None,
            }
        }
    };

    let loop_spec = {
        let rl = raw.loop_.unwrap_or_default();
        let d = LoopSpec::default();
        let iterations = rl
            .iterations
            .map_or(Some(d.iterations), |v| to_count(v, "loop.iterations", &mut errs));
        let runs = rl.runs.map_or(Some(d.runs), |v| to_count(v, "loop.runs", &mut errs));
        let budget = rl
            .report_char_budget
            .map_or(Some(d.report_char_budget), |v| to_count(v, "loop.report_char_budget", &mut errs));
        let policy = match rl.on_missing_code_block.as_deref() {
            None => Some(d.on_missing_code_block),
            Some(s) => {
                let p = OnMissingCodeBlock::parse(s);
                if p.is_none() {
                    errs.push(format!(
                        "loop.on_missing_code_block must be fail_iteration or reprompt (got {s:?})"
                    ));
                }
                p
            }
        };
        match (iterations, runs, budget, policy) {
            (Some(iterations), Some(runs), Some(report_char_budget), Some(on_missing_code_block)) => {
                Some(LoopSpec {
                    iterations,
                    runs,
                    report_char_budget,
                    on_missing_code_block,
                })
            }
            _ => None,
        }
    };

    let prompts = load_prompts(raw.prompts.unwrap_or_default(), base_dir, &mut errs)?;
    prompts.check_names()?;

    let out_dir = resolve(base_dir, raw.out_dir.as_deref().unwrap_or(DEFAULT_OUT_DIR));

    match (compiler, target, harness, provider, loop_spec) {
        (Some(compiler), Some(target), Some(harness), Some(provider), Some(loop_spec)) if errs.is_empty() => {
            let config = Config {
                compiler,
                target,
                harness,
                provider,
                loop_spec,
                prompts,
                out_dir,
            };
            config.validate()?;
            Ok(config)
        }
        (compiler, target, harness, provider, loop_spec) => {
            // Surface invariant violations of the parts that did parse alongside the parse-level ones.
            if let Some(c) = &compiler {
                c.violations(&mut errs);
            }
            if let Some(t) = &target {
                errs.extend(t.region.violations());
            }
            if let Some(h) = &harness {
                errs.extend(h.violations());
            }
            if let Some(p) = &provider {
                errs.extend(p.violations());
            }
            if let Some(l) = &loop_spec {
                l.violations(&mut errs);
            }
            prompts.violations(&mut errs);
            Err(ConfigError::Validation(errs))
        }
    }
}

fn parse_region(r: RawRegion, errs: &mut Vec<String>) -> Option<Region> {
    match r.mode.as_deref().unwrap_or("whole-file") {
        "whole-file" => Some(Region::WholeFile),
        "lines" => {
            let (Some(s), Some(e)) = (r.start_line, r.end_line) else {
                errs.push("lines mode requires target.region.start_line and target.region.end_line".into());
                return None;
            };
            let s = to_count::<usize>(s, "target.region.start_line", errs)?;
            let e = to_count::<usize>(e, "target.region.end_line", errs)?;
            Some(Region::Lines {
                start_line: s,
                end_line: e,
            })
        }
        "markers" => Some(Region::Markers {
            begin_marker: r.begin_marker.unwrap_or_default(),
            end_marker: r.end_marker.unwrap_or_default(),
        }),
        other => {
            errs.push(format!(
                "target.region.mode must be whole-file, lines or markers (got {other:?})"
            ));
            None
        }
    }
}

fn load_prompt(
    value: Option<String>,
    default: String,
    id: &str,
    base: &Path,
    errs: &mut Vec<String>,
) -> PromptTemplate {
    let Some(v) = value else {
        return PromptTemplate::new(default);
    };
    if let Some(rest) = v.strip_prefix("@@") {
        return PromptTemplate::new(format!("@{rest}"));
    }
    match v.strip_prefix('@') {
        Some(file) => {
            let path = resolve(base, file.trim());
            match fs::read_to_string(&path) {
                Ok(text) => PromptTemplate::new(text),
                Err(e) => {
                    errs.push(format!("prompts.{id}: cannot read {}: {e}", path.display()));
                    PromptTemplate::new(default)
                }
            }
        }
        None => PromptTemplate::new(v),
    }
}

fn load_prompts(r: RawPrompts, base: &Path, errs: &mut Vec<String>) -> Result<PromptSet, ConfigError> {
    let d = PromptSet::default();
    Ok(PromptSet {
        context: load_prompt(r.context, d.context.text, "context", base, errs),
        first: load_prompt(r.first, d.first.text, "first", base, errs),
        success: load_prompt(r.success, d.success.text, "success", base, errs),
        compile_error: load_prompt(r.compile_error, d.compile_error.text, "compile_error", base, errs),
        test_failure: load_prompt(r.test_failure, d.test_failure.text, "test_failure", base, errs),
    })
}
