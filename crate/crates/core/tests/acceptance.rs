//! Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//!
//! Run with `cargo test -p optloop --test acceptance`. Exits nonzero when any
//! criterion fails; a SKIP is printed (with the reason) when the environment
//! lacks what a gated criterion needs.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use optloop::config::{render_prompt, CompilerFamily, Placeholder, PromptContext, PromptSet, RenderError};
use optloop::evaluator::EvalResult;
use optloop::optreport::{parse_report, ReportDialect};
use optloop::orchestrator::{run_once, RunOptions};
use optloop::reporting::{aggregate, table_row};
use optloop::source::{extract_snippet, locate_region, splice_snippet, Region, SourceVersion};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

enum Outcome {
    Pass(String),
    Skip(String),
}

type Check = fn() -> Result<Outcome, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------

fn golden_report_parse() -> Result<Outcome, String> {
    let text = fs::read_to_string(fixtures().join("matmul_clang_report.txt")).map_err(|e| e.to_string())?;
    let parsed = parse_report(&text, ReportDialect::ClangRpass);
    let got: Vec<(usize, usize, String)> = parsed
        .diagnostics
        .iter()
        .map(|d| (d.line, d.column, d.pass_name.clone().unwrap_or_default()))
        .collect();
    let want: Vec<(usize, usize, String)> = [
        (19, 18, "licm"),
        (19, 18, "licm"),
        (19, 18, "licm"),
        (18, 7, "loop-vectorize"),
        (14, 5, "regalloc"),
    ]
    .iter()
    .map(|&(l, c, p)| (l, c, p.to_string()))
    .collect();
    ensure(got == want, format!("got {got:?}"))?;
    Ok(Outcome::Pass("5 diagnostics, exact (line, col, pass)".into()))
}

fn prompt_set_rendering() -> Result<Outcome, String> {
    let prompts = PromptSet::default();
    let full = PromptContext {
        code: Some("res(i,j) += lhs(i, k) * rhs(k, j);".into()),
        report: Some("simplematrix.cc:18:7: missed: loop not vectorized [loop-vectorize]".into()),
        scoreint: Some(417),
        compilerfamily: Some("Clang".into()),
    };
    let mut omissions = 0;
    for (name, t) in [
        ("first", &prompts.first),
        ("compile_error", &prompts.compile_error),
        ("test_failure", &prompts.test_failure),
    ] {
        let text = render_prompt(t, &full).map_err(|e| format!("{name}: {e}"))?;
        ensure(!text.contains('{'), format!("{name}: unsubstituted brace in {text:?}"))?;
        for p in [Placeholder::Code, Placeholder::Report, Placeholder::ScoreInt, Placeholder::CompilerFamily] {
            if !t.uses(p) {
                continue;
            }
            let mut ctx = full.clone();
            match p {
                Placeholder::Code => ctx.code = None,
                Placeholder::Report => ctx.report = None,
                Placeholder::ScoreInt => ctx.scoreint = None,
                Placeholder::CompilerFamily => ctx.compilerfamily = None,
            }
            match render_prompt(t, &ctx) {
                Err(RenderError::MissingVariable(v)) if v == p.name() => omissions += 1,
                other => return Err(format!("{name} without {}: {other:?}", p.name())),
            }
        }
    }
    ensure(omissions >= 6, format!("only {omissions} omissions exercised"))?;
    Ok(Outcome::Pass(format!("3 templates rendered, {omissions} omissions rejected")))
}

fn replay_end_to_end() -> Result<Outcome, String> {
    let responses = vec![
        candidate(50, Some("TESTS_FAIL")),
        candidate(40, Some("COMPILE_FAIL")),
        candidate(60, None),
    ];
    let a = Scenario::new(&responses, ScenarioOpts::default());
    let b = Scenario::new(&responses, ScenarioOpts::default());
    let rec = run_once(&a.config(), 1, RunOptions::default()).map_err(|e| e.to_string())?;
    run_once(&b.config(), 1, RunOptions::default()).map_err(|e| e.to_string())?;
    ensure(
        kinds(&rec) == ["first", "test_failure", "compile_error"],
        format!("kinds {:?}", kinds(&rec)),
    )?;
    let conv_len = a.conversation(1).len();
    ensure(conv_len == 7, format!("conversation length {conv_len}"))?;
    ensure(rec.best_iteration == Some(3), format!("best {:?}", rec.best_iteration))?;
    ensure(
        a.record_json_without_timing(1) == b.record_json_without_timing(1),
        "record.json differs between executions",
    )?;
    Ok(Outcome::Pass("kinds, length 7, best = 3, byte-identical record".into()))
}

fn splice_round_trip() -> Result<Outcome, String> {
    const CASES: u32 = 1000;
    let mut runner = TestRunner::new(PtConfig {
        cases: CASES,
        failure_persistence: None,
        ..PtConfig::default()
    });
    // (file lines, trailing newline, region start, region length, replacement snippet)
    let strategy = (
        prop::collection::vec("[ a-z0-9(){};=+*]{0,16}", 1..60),
        any::<bool>(),
        any::<prop::sample::Index>(),
        any::<prop::sample::Index>(),
        "[ a-z;(){}\n]{0,80}",
    );
    runner
        .run(&strategy, |(lines, trailing, s, l, new)| {
            // line-range region: extract then splice is the identity
            let mut text = lines.join("\n");
            if trailing {
                text.push('\n');
            }
            let n = optloop::source::line_count(&text);
            if n > 0 {
                let start = s.index(n) + 1;
                let end = start + l.index(n - start + 1);
                let v = SourceVersion::original(text.clone(), &Region::Lines { start_line: start, end_line: end })
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                let same = splice_snippet(&v, &v.snippet);
                prop_assert_eq!(&same.full_text, &text);
            }

            // marker region: markers survive arbitrary splices and the snippet reads back
            let cut = s.index(lines.len() + 1);
            let mut with_markers: Vec<String> = lines[..cut].to_vec();
            with_markers.push("// OPT-BEGIN".into());
            with_markers.extend(lines[cut..].iter().cloned());
            with_markers.push("// OPT-END".into());
            with_markers.push("tail();".into());
            let mut text = with_markers.join("\n");
            if trailing {
                text.push('\n');
            }
            let region = Region::Markers {
                begin_marker: "OPT-BEGIN".into(),
                end_marker: "OPT-END".into(),
            };
            if let Ok(v) = SourceVersion::original(text.clone(), &region) {
                prop_assert_eq!(splice_snippet(&v, &v.snippet).full_text, text.clone());
                let next = splice_snippet(&v, &new);
                let span = locate_region(&next.full_text, &region).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert_eq!(span, next.region_lines);
                prop_assert_eq!(extract_snippet(&next.full_text, span).unwrap(), new.clone());
                let tail = if trailing { "tail();\n" } else { "tail();" };
                prop_assert!(next.full_text.ends_with(tail));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(Outcome::Pass(format!("{CASES} random cases")))
}

fn aggregation_arithmetic() -> Result<Outcome, String> {
    use optloop::orchestrator::{IterationRecord, PromptKind, RunRecord};
    let run = |i: usize, baseline: u64, best: u64| RunRecord {
        run_index: i,
        baseline_score_ms: baseline,
        iterations: vec![IterationRecord {
            index: 1,
            prompt_kind: PromptKind::First,
            prompt_text: String::new(),
            response_text: String::new(),
            extracted_code: Some(String::new()),
            eval: Some(EvalResult::Passed { score_ms: best }),
            report_packed: None,
            code_fingerprint: None,
            usage: Default::default(),
            cost_usd: 0.0,
        }],
        best_iteration: None,
        best_score_ms: best.min(baseline),
        total_cost_usd: 0.0,
        wall_time_seconds: 0.0,
        concurrent: false,
    };
    // speedups 1.4, 1, 1, 1, 1
    let runs: Vec<_> = [(700, 500), (500, 500), (500, 500), (500, 500), (500, 500)]
        .iter()
        .enumerate()
        .map(|(i, &(b, s))| run(i + 1, b, s))
        .collect();
    let s = aggregate(&runs).map_err(|e| e.to_string())?;
    ensure((s.max_speedup - 1.4).abs() < 1e-12, format!("max {}", s.max_speedup))?;
    ensure((s.avg_speedup - 1.08).abs() <= 0.005, format!("avg {}", s.avg_speedup))?;
    ensure(s.num_improved == 1, format!("num {}", s.num_improved))?;
    let flat: Vec<_> = (1..=5).map(|i| run(i, 500, 500)).collect();
    let f = aggregate(&flat).map_err(|e| e.to_string())?;
    ensure(table_row(&f) == "| 1.0 | 1.00 | 0 |", table_row(&f))?;
    Ok(Outcome::Pass(format!("{} and {}", table_row(&s), table_row(&f))))
}

fn failure_isolation() -> Result<Outcome, String> {
    let mut checked = 0;
    for (n, responses) in isolation_scenarios().iter().enumerate() {
        for policy in ["fail_iteration", "reprompt"] {
            let sc = Scenario::new(
                responses,
                ScenarioOpts {
                    iterations: responses.len() as u32,
                    policy,
                    extra: CODE_EVERYWHERE_PROMPTS,
                    runs: 1,
                },
            );
            let rec = run_once(&sc.config(), 1, RunOptions::default()).map_err(|e| e.to_string())?;
            let v = failure_isolation_violations(&rec);
            ensure(v.is_empty(), format!("scenario {n} ({policy}): {v:?}"))?;
            checked += rec.iterations.iter().filter(|i| i.code_fingerprint.is_some()).count();
        }
    }
    Ok(Outcome::Pass(format!("{checked} prompt code slots checked")))
}

/// Major version of the first line of `<cmd> --version`.
fn compiler_major(cmd: &str) -> Option<u32> {
    let out = Command::new(cmd).arg("--version").output().ok()?;
    let first = String::from_utf8_lossy(&out.stdout).lines().next()?.to_string();
    let re = regex::Regex::new(r"(\d+)\.\d+\.\d+").unwrap();
    re.captures(&first)?[1].parse().ok()
}

fn demo_smoke(command: &str, family: CompilerFamily) -> Result<String, String> {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo/matmul");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for f in ["simplematrix.h", "simplematrix.cc", "harness.cc", "harness.sh", "replay.txt", "config.toml"] {
        fs::copy(demo.join(f), dir.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
    }
    // only the blocked-kernel answer
    let script = fs::read_to_string(dir.path().join("replay.txt")).map_err(|e| e.to_string())?;
    let blocked = optloop::llm::parse_replay_script(&script)
        .pop()
        .ok_or("empty demo replay script")?;
    fs::write(dir.path().join("replay.txt"), format!("{blocked}\n")).map_err(|e| e.to_string())?;
    let config_text = fs::read_to_string(dir.path().join("config.toml"))
        .map_err(|e| e.to_string())?
        .replace("family = \"clang\"", &format!("family = \"{}\"", family.as_str()))
        .replace("command = \"clang++\"", &format!("command = \"{command}\""))
        .replace("iterations = 2", "iterations = 1");
    fs::write(dir.path().join("config.toml"), config_text).map_err(|e| e.to_string())?;
    let config = optloop::load_config(&dir.path().join("config.toml")).map_err(|e| e.to_string())?;
    ensure(
        config.compiler.opt_flags == ["-O3", "-march=native", "-DNDEBUG=1"],
        format!("flags {:?}", config.compiler.opt_flags),
    )?;
    let rec = run_once(&config, 1, RunOptions::default()).map_err(|e| e.to_string())?;
    let it = &rec.iterations[0];
    let report = it.report_packed.as_deref().unwrap_or_default();
    ensure(!report.trim().is_empty(), "filtered report is empty")?;
    ensure(
        matches!(it.eval, Some(EvalResult::Passed { .. })),
        format!("blocked kernel: {:?}", it.eval),
    )?;
    let s = aggregate(std::slice::from_ref(&rec)).map_err(|e| e.to_string())?;
    ensure(s.max_speedup >= 1.0, format!("speedup {}", s.max_speedup))?;
    Ok(format!(
        "{command}: baseline {} ms, blocked {} ms ({:.2}x), {} report lines",
        rec.baseline_score_ms,
        it.eval.as_ref().and_then(EvalResult::score).unwrap_or(0),
        s.max_speedup,
        report.lines().count()
    ))
}

fn live_compiler_smoke() -> Result<Outcome, String> {
    let candidates = [
        ("clang++", CompilerFamily::Clang, 15),
        ("g++", CompilerFamily::Gcc, 12),
    ];
    let found: Vec<String> = candidates
        .iter()
        .map(|(c, _, _)| format!("{c} {}", compiler_major(c).map_or("absent".into(), |v| v.to_string())))
        .collect();
    for (cmd, family, min) in candidates {
        if compiler_major(cmd).is_some_and(|v| v >= min) {
            return demo_smoke(cmd, family).map(Outcome::Pass);
        }
    }
    Ok(Outcome::Skip(format!(
        "needs Clang >= 15 or GCC >= 12; found {}",
        found.join(", ")
    )))
}

/// Not a criterion: the same demo check with whatever compiler is installed.
fn demo_smoke_any_compiler() -> Result<Outcome, String> {
    for (cmd, family) in [("clang++", CompilerFamily::Clang), ("g++", CompilerFamily::Gcc)] {
        if compiler_major(cmd).is_some() {
            return demo_smoke(cmd, family).map(Outcome::Pass);
        }
    }
    Ok(Outcome::Skip("no C++ compiler on PATH".into()))
}

fn harness_protocol_grid() -> Result<Outcome, String> {
    let bad = harness_grid_mismatches();
    ensure(bad.is_empty(), bad.join("; "))?;
    Ok(Outcome::Pass("8/8 cells classified as documented".into()))
}

fn main() {
    let checks: &[(&str, Duration, Check)] = &[
        ("golden report parse", Duration::from_secs(1), golden_report_parse),
        ("prompt-set rendering", Duration::from_secs(1), prompt_set_rendering),
        ("replay end-to-end", Duration::from_secs(10), replay_end_to_end),
        ("splice round-trip property", Duration::from_secs(5), splice_round_trip),
        ("aggregation arithmetic", Duration::from_secs(1), aggregation_arithmetic),
        ("failure isolation invariant", Duration::from_secs(5), failure_isolation),
        ("live-compiler smoke [gated]", Duration::from_secs(120), live_compiler_smoke),
        ("harness protocol grid", Duration::from_secs(5), harness_protocol_grid),
    ];
    let supplementary: &[(&str, Duration, Check)] = &[(
        "demo smoke, installed compiler [supplementary]",
        Duration::from_secs(120),
        demo_smoke_any_compiler,
    )];

    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (group, list) in [("criterion", checks), ("extra", supplementary)] {
        for (name, limit, check) in list {
            let t0 = Instant::now();
            let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
            let took = t0.elapsed();
            let (tag, detail) = match result {
                Ok(Outcome::Pass(_)) if took > *limit => {
                    ("FAIL", format!("took {:.2}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
                }
                Ok(Outcome::Pass(d)) => ("PASS", d),
                Ok(Outcome::Skip(d)) => ("SKIP", d),
                Err(e) => ("FAIL", e),
            };
            if tag == "FAIL" && group == "criterion" {
                failed += 1;
            }
            println!(
                "{tag} {group}: {name} ({:.2}s / {}s) - {detail}",
                took.as_secs_f64(),
                limit.as_secs()
            );
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
