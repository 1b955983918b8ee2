//! The optimization loop for one run.
//!
//! A run measures the unmodified source, then spends its iteration budget on
//! prompt → completion → extract → splice → evaluate cycles. Candidates are
//! always spliced against the last version that passed, so the file used for
//! report regeneration stays buildable; the model still sees its own broken
//! attempts through the conversation history.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::config::{render_prompt, Config, OnMissingCodeBlock, Placeholder, PromptContext, PromptTemplate, RenderError};
use crate::evaluator::{self, tail_truncate, EvalError, EvalResult, Workspace};
use crate::llm::{Client, Conversation, ConversationError, LlmError, Usage};
use crate::optreport::{
    self, filter_by_region, pack_report, parse_report, CompileEnv, CompileMode, CompilerError, ReportDialect,
    DEFAULT_COMPILER_TIMEOUT,
};
use crate::source::{extract_code_block, splice_snippet, SourceError, SourceText, SourceVersion};

/// Sent ahead of the regular follow-up prompt when a response carried no code block.
pub const MISSING_CODE_SENTENCE: &str =
    "Your previous response contained no code block. Return the entire code in a single code block.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    First,
    Success,
    CompileError,
    TestFailure,
    MissingCode,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::First => "first",
            PromptKind::Success => "success",
            PromptKind::CompileError => "compile_error",
            PromptKind::TestFailure => "test_failure",
            PromptKind::MissingCode => "missing_code",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            PromptKind::First,
            PromptKind::Success,
            PromptKind::CompileError,
            PromptKind::TestFailure,
            PromptKind::MissingCode,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub prompt_kind: PromptKind,
    pub prompt_text: String,
    pub response_text: String,
    pub extracted_code: Option<String>,
    pub eval: Option<EvalResult>,
    pub report_packed: Option<String>,
    /// SHA-256 of the value substituted for `{code}`, when the template used it.
    pub code_fingerprint: Option<String>,
    pub usage: Usage,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub baseline_score_ms: u64,
    pub iterations: Vec<IterationRecord>,
    /// `None` when no candidate beat the original.
    pub best_iteration: Option<usize>,
    pub best_score_ms: u64,
    pub total_cost_usd: f64,
    pub wall_time_seconds: f64,
    /// Set when other runs shared the machine while this one was timed.
    pub concurrent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Best {
    /// `None` is the original source.
    pub iteration: Option<usize>,
    pub score_ms: u64,
}

/// Minimal score over the baseline and every passing iteration; ties go to the earliest.
pub fn select_best(run: &RunRecord) -> Best {
    let mut best = Best {
        iteration: None,
        score_ms: run.baseline_score_ms,
    };
    for it in &run.iterations {
        if let Some(score) = it.eval.as_ref().and_then(EvalResult::score) {
            if score < best.score_ms {
                best = Best {
                    iteration: Some(it.index),
                    score_ms: score,
                };
            }
        }
    }
    best
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("baseline does not compile:\n{0}")]
    BaselineCompileFailed(String),
    #[error("baseline fails the harness:\n{0}")]
    BaselineTestsFailed(String),
    #[error("toolchain failure: {0}")]
    Compiler(#[from] CompilerError),
    #[error("harness failure: {0}")]
    Harness(#[from] EvalError),
    #[error("provider failure: {0}")]
    Provider(#[from] LlmError),
    #[error("target region: {0}")]
    Source(#[from] SourceError),
    #[error("prompt rendering: {0}")]
    Render(#[from] RenderError),
    #[error("conversation: {0}")]
    Conversation(#[from] ConversationError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl RunError {
    pub fn is_baseline(&self) -> bool {
        matches!(self, RunError::BaselineCompileFailed(_) | RunError::BaselineTestsFailed(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Follow-up prompt selection.
///
/// `last_eval` is the most recent evaluated outcome (absent before any
/// candidate was evaluated, which reads as the passing baseline).
pub fn choose_prompt(
    last_eval: Option<&EvalResult>,
    prev_code_extracted: bool,
    iteration_index: usize,
    policy: OnMissingCodeBlock,
) -> PromptKind {
    if iteration_index <= 1 {
        return PromptKind::First;
    }
    if !prev_code_extracted && policy == OnMissingCodeBlock::Reprompt {
        return PromptKind::MissingCode;
    }
    match last_eval {
        None | Some(EvalResult::Passed { .. }) => PromptKind::Success,
        Some(EvalResult::CompileFailed { .. }) => PromptKind::CompileError,
        Some(EvalResult::TestsFailed { .. }) => PromptKind::TestFailure,
    }
}

/// Per-run filesystem layout.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub run_dir: PathBuf,
    pub workspace: Workspace,
    pub extension: String,
}

impl RunLayout {
    pub fn new(config: &Config, run_index: usize) -> Self {
        let run_dir = config.out_dir.join(format!("run{run_index}"));
        let workdir = run_dir.join("work");
        let source = &config.target.source_path;
        let source_name = PathBuf::from(source.file_name().unwrap_or_else(|| "candidate".as_ref()));
        let source_dir = source.parent().map(Path::to_path_buf).unwrap_or_default();
        let extension = source
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_else(|| "txt".into());
        let object = optreport::object_path(&workdir.join(&source_name), CompileMode::Build);
        let harness_env = vec![
            ("OPTLOOP_WORKDIR".into(), workdir.display().to_string()),
            ("OPTLOOP_SOURCE".into(), workdir.join(&source_name).display().to_string()),
            ("OPTLOOP_SOURCE_DIR".into(), source_dir.display().to_string()),
            ("OPTLOOP_OBJECT".into(), object.display().to_string()),
            ("OPTLOOP_COMPILER".into(), config.compiler.command.clone()),
            ("OPTLOOP_OPT_FLAGS".into(), config.compiler.opt_flags.join(" ")),
            ("OPTLOOP_RUN".into(), run_index.to_string()),
        ];
        Self {
            workspace: Workspace {
                compile: CompileEnv {
                    workdir,
                    include_dirs: vec![source_dir],
                    timeout: DEFAULT_COMPILER_TIMEOUT,
                },
                source_name,
                harness_env,
            },
            run_dir,
            extension,
        }
    }

    pub fn iter_dir(&self, index: usize) -> PathBuf {
        self.run_dir.join(format!("iter{index}"))
    }
}

/// The original source, read from disk with its line-ending style.
pub struct Target {
    pub text: SourceText,
    pub original: SourceVersion,
}

impl Target {
    pub fn load(config: &Config) -> Result<Self, RunError> {
        let path = &config.target.source_path;
        let raw = fs::read_to_string(path).map_err(io_err(path))?;
        let text = SourceText::from_raw(&raw);
        let original = SourceVersion::original(text.text.clone(), &config.target.region)?;
        Ok(Self { text, original })
    }
}

fn place_candidate(layout: &RunLayout, target: &Target, version: &SourceVersion) -> Result<(), RunError> {
    let path = layout.workspace.source_path();
    write_file(&path, &target.text.render(&version.full_text))
}

fn save_conversation(layout: &RunLayout, conv: &Conversation) -> Result<(), RunError> {
    write_file(&layout.run_dir.join("conversation.md"), &conv.to_markdown())?;
    let json = serde_json::to_string_pretty(conv).expect("conversation serializes");
    write_file(&layout.run_dir.join("conversation.json"), &json)
}

/// Compiles and times the unmodified source. Fails before any model traffic.
pub fn establish_baseline(config: &Config, layout: &RunLayout, target: &Target) -> Result<u64, RunError> {
    fs::create_dir_all(&layout.workspace.compile.workdir).map_err(io_err(&layout.workspace.compile.workdir))?;
    place_candidate(layout, target, &target.original)?;
    match evaluator::evaluate(&config.compiler, &config.harness, &layout.workspace)? {
        EvalResult::Passed { score_ms } => Ok(score_ms),
        EvalResult::CompileFailed { messages } => Err(RunError::BaselineCompileFailed(messages)),
        EvalResult::TestsFailed { messages } => Err(RunError::BaselineTestsFailed(messages)),
    }
}

/// The loop state a prompt is built from.
pub struct PromptState<'a> {
    /// Last version that passed (or the original).
    pub good: &'a SourceVersion,
    /// Score of `good`: the latest passing score, not the best.
    pub good_score: u64,
    pub last_eval: Option<&'a EvalResult>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPrompt {
    pub text: String,
    pub report_packed: Option<String>,
    pub code_fingerprint: Option<String>,
}

/// Regenerates, filters and packs the optimization report for `version`.
pub fn packed_report_for(
    config: &Config,
    layout: &RunLayout,
    target: &Target,
    version: &SourceVersion,
) -> Result<String, RunError> {
    place_candidate(layout, target, version)?;
    let run = optreport::run_compiler(
        &config.compiler,
        &layout.workspace.source_name,
        CompileMode::Report,
        &layout.workspace.compile,
    )?;
    if !run.succeeded() {
        warn!(status = run.exit_status, "report compilation exited nonzero");
    }
    let parsed = parse_report(&run.output(), ReportDialect::for_family(config.compiler.family));
    let target_file = layout.workspace.source_name.display().to_string();
    let kept = filter_by_region(&parsed.diagnostics, version.region_lines, &target_file);
    Ok(pack_report(&kept, config.loop_spec.report_char_budget))
}

fn render_with(template: &PromptTemplate, ctx: &PromptContext) -> Result<(String, Option<String>), RunError> {
    let text = render_prompt(template, ctx)?;
    let fp = if template.uses(Placeholder::Code) {
        ctx.code.as_deref().map(fingerprint)
    } else {
        None
    };
    Ok((text, fp))
}

pub fn build_prompt(
    kind: PromptKind,
    state: &PromptState<'_>,
    config: &Config,
    layout: &RunLayout,
    target: &Target,
) -> Result<BuiltPrompt, RunError> {
    let mut ctx = PromptContext {
        code: Some(state.good.snippet.clone()),
        report: None,
        scoreint: Some(state.good_score),
        compilerfamily: Some(config.compiler.family_name()),
    };
    let prompts = &config.prompts;
    match kind {
        PromptKind::First | PromptKind::Success | PromptKind::MissingCode => {
            let report = packed_report_for(config, layout, target, state.good)?;
            ctx.report = Some(report.clone());
            let template = if kind == PromptKind::First {
                &prompts.first
            } else {
                &prompts.success
            };
            let (body, code_fingerprint) = render_with(template, &ctx)?;
            let text = if kind == PromptKind::MissingCode {
                format!("{MISSING_CODE_SENTENCE}\n\n{body}")
            } else {
                body
            };
            Ok(BuiltPrompt {
                text,
                report_packed: Some(report),
                code_fingerprint,
            })
        }
        PromptKind::CompileError | PromptKind::TestFailure => {
            let messages = state.last_eval.and_then(EvalResult::messages).unwrap_or_default();
            ctx.report = Some(tail_truncate(messages, config.loop_spec.report_char_budget));
            let template = if kind == PromptKind::CompileError {
                &prompts.compile_error
            } else {
                &prompts.test_failure
            };
            let (text, code_fingerprint) = render_with(template, &ctx)?;
            Ok(BuiltPrompt {
                text,
                report_packed: None,
                code_fingerprint,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub concurrent: bool,
}

/// One complete run with a provider built from the config after the baseline passes.
pub fn run_once(config: &Config, run_index: usize, opts: RunOptions) -> Result<RunRecord, RunError> {
    run_once_with(config, run_index, opts, || Client::from_spec(&config.provider))
}

pub fn run_once_with(
    config: &Config,
    run_index: usize,
    opts: RunOptions,
    make_client: impl FnOnce() -> Result<Client, LlmError>,
) -> Result<RunRecord, RunError> {
    let started = Instant::now();
    let layout = RunLayout::new(config, run_index);
    let target = Target::load(config)?;
    fs::create_dir_all(&layout.run_dir).map_err(io_err(&layout.run_dir))?;

    let baseline = establish_baseline(config, &layout, &target)?;
    info!(run = run_index, baseline_ms = baseline, "baseline established");
    let mut client = make_client()?;

    let policy = config.loop_spec.on_missing_code_block;
    let mut good = target.original.clone();
    let mut good_score = baseline;
    let mut best_version = target.original.clone();
    let mut best_score = baseline;
    let mut last_eval: Option<EvalResult> = None;
    let mut prev_extracted = true;

    let system = render_prompt(
        &config.prompts.context,
        &PromptContext {
            code: Some(good.snippet.clone()),
            report: None,
            scoreint: Some(baseline),
            compilerfamily: Some(config.compiler.family_name()),
        },
    )?;
    let mut conv = Conversation::with_system(system);
    let mut records = Vec::new();
    let mut total_cost = 0.0;

    for index in 1..=config.loop_spec.iterations as usize {
        let kind = choose_prompt(last_eval.as_ref(), prev_extracted, index, policy);
        let built = build_prompt(
            kind,
            &PromptState {
                good: &good,
                good_score,
                last_eval: last_eval.as_ref(),
            },
            config,
            &layout,
            &target,
        )?;
        conv.push_user(built.text.clone())?;
        let (reply, usage) = client.complete(&conv)?;
        conv.push_assistant(reply.content.clone())?;
        let cost = client.cost(usage);
        total_cost += cost;

        let iter_dir = layout.iter_dir(index);
        fs::create_dir_all(&iter_dir).map_err(io_err(&iter_dir))?;
        write_file(&iter_dir.join("prompt.md"), &built.text)?;
        write_file(&iter_dir.join("response.md"), &reply.content)?;

        // An empty block would silently delete the region; treat it as no block.
        let extracted = extract_code_block(&reply.content).filter(|c| !c.trim().is_empty());
        let eval = match &extracted {
            Some(code) => {
                let mut candidate = splice_snippet(&good, code);
                candidate.iteration_index = index;
                write_file(
                    &iter_dir.join(format!("source.{}", layout.extension)),
                    &target.text.render(&candidate.full_text),
                )?;
                place_candidate(&layout, &target, &candidate)?;
                let result = evaluator::evaluate(&config.compiler, &config.harness, &layout.workspace)?;
                if let EvalResult::Passed { score_ms } = result {
                    if score_ms < best_score {
                        best_score = score_ms;
                        best_version = candidate.clone();
                    }
                    good = candidate;
                    good_score = score_ms;
                }
                prev_extracted = true;
                last_eval = Some(result.clone());
                Some(result)
            }
            None => {
                prev_extracted = false;
                None
            }
        };
        write_file(
            &iter_dir.join("eval.txt"),
            &eval
                .as_ref()
                .map(EvalResult::describe)
                .unwrap_or_else(|| "no_code_block\n".into()),
        )?;
        info!(
            run = run_index,
            iteration = index,
            kind = %kind,
            outcome = eval.as_ref().map_or("no_code_block", EvalResult::outcome),
            score_ms = eval.as_ref().and_then(EvalResult::score),
            "iteration finished"
        );
        records.push(IterationRecord {
            index,
            prompt_kind: kind,
            prompt_text: built.text,
            response_text: reply.content,
            extracted_code: extracted,
            eval,
            report_packed: built.report_packed,
            code_fingerprint: built.code_fingerprint,
            usage,
            cost_usd: cost,
        });
        save_conversation(&layout, &conv)?;
    }

    let mut record = RunRecord {
        run_index,
        baseline_score_ms: baseline,
        iterations: records,
        best_iteration: None,
        best_score_ms: baseline,
        total_cost_usd: total_cost,
        wall_time_seconds: 0.0,
        concurrent: opts.concurrent,
    };
    let best = select_best(&record);
    debug_assert_eq!(best.score_ms, best_score);
    record.best_iteration = best.iteration;
    record.best_score_ms = best.score_ms;

    save_conversation(&layout, &conv)?;
    write_file(
        &layout.run_dir.join(format!("best.{}", layout.extension)),
        &target.text.render(&best_version.full_text),
    )?;
    place_candidate(&layout, &target, &best_version)?;
    record.wall_time_seconds = started.elapsed().as_secs_f64();
    let json = serde_json::to_string_pretty(&record).expect("RunRecord serializes");
    write_file(&layout.run_dir.join("record.json"), &json)?;
    Ok(record)
}
