//! Scenario builder shared by the integration tests: a temp directory holding the
//! stub compiler, stub harness, a small kernel and a replay script.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use optloop::config::{load_config, Config};
use optloop::llm::{Conversation, REPLAY_SEPARATOR};
use optloop::orchestrator::RunRecord;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Prompt set with `{code}` in every follow-up template, so fingerprints are recorded everywhere.
pub const CODE_EVERYWHERE_PROMPTS: &str = r#"
[prompts]
context = "You optimize C++ for {compilerfamily}."
first = "Optimize:\n```cpp\n{code}\n```\nScore {scoreint} ms.\n{report}"
success = "Now {scoreint} ms. Current code:\n```cpp\n{code}\n```\n{report}"
compile_error = "Did not compile:\n{report}\nLast good code:\n```cpp\n{code}\n```"
test_failure = "Tests failed:\n{report}\nLast good code:\n```cpp\n{code}\n```"
"#;

pub struct Scenario {
    pub dir: tempfile::TempDir,
    pub config_path: PathBuf,
}

#[derive(Clone)]
pub struct ScenarioOpts<'a> {
    pub iterations: u32,
    pub runs: u32,
    pub policy: &'a str,
    pub extra: &'a str,
}

impl Default for ScenarioOpts<'_> {
    fn default() -> Self {
        Self {
            iterations: 3,
            runs: 1,
            policy: "fail_iteration",
            extra: "",
        }
    }
}

impl Scenario {
    pub fn new(responses: &[String], opts: ScenarioOpts<'_>) -> Self {
        Self::with_kernel(responses, opts, None)
    }

    /// `kernel` replaces the default target source.
    pub fn with_kernel(responses: &[String], opts: ScenarioOpts<'_>, kernel: Option<&str>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let stub = fixtures().join("stub");
        for f in ["stubcc.sh", "stubharness.sh", "kernel.cc"] {
            fs::copy(stub.join(f), dir.path().join(f)).unwrap();
        }
        if let Some(k) = kernel {
            fs::write(dir.path().join("kernel.cc"), k).unwrap();
        }
        fs::write(dir.path().join("replay.txt"), replay_script(responses)).unwrap();
        let config = format!(
            r#"out_dir = "out"

[compiler]
family = "clang"
command = "stubcc.sh"
opt_flags = ["-O2"]

[target]
source = "kernel.cc"

[target.region]
mode = "markers"
begin_marker = "OPT-BEGIN"
end_marker = "OPT-END"

[harness]
command = ["sh", "stubharness.sh"]
timeout_seconds = 30

[provider]
kind = "replay"
replay_file = "replay.txt"

[loop]
iterations = {}
runs = {}
on_missing_code_block = "{}"
{}"#,
            opts.iterations, opts.runs, opts.policy, opts.extra
        );
        let config_path = dir.path().join("config.toml");
        fs::write(&config_path, config).unwrap();
        Self { dir, config_path }
    }

    pub fn config(&self) -> Config {
        load_config(&self.config_path).unwrap()
    }

    pub fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    pub fn run_dir(&self, run: usize) -> PathBuf {
        self.out().join(format!("run{run}"))
    }

    pub fn conversation(&self, run: usize) -> Conversation {
        let text = fs::read_to_string(self.run_dir(run).join("conversation.json")).unwrap();
        serde_json::from_str(&text).unwrap()
    }

    pub fn calls(&self, run: usize) -> Vec<String> {
        fs::read_to_string(self.run_dir(run).join("work/calls.log"))
            .unwrap_or_default()
            .lines()
            .map(str::to_string)
            .collect()
    }

    /// record.json with wall-clock fields removed.
    pub fn record_json_without_timing(&self, run: usize) -> String {
        let text = fs::read_to_string(self.run_dir(run).join("record.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("wall_time_seconds");
        serde_json::to_string_pretty(&v).unwrap()
    }
}

pub fn replay_script(responses: &[String]) -> String {
    let mut s = String::new();
    for (i, r) in responses.iter().enumerate() {
        if i > 0 {
            s.push_str(REPLAY_SEPARATOR);
            s.push('\n');
        }
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// A model reply whose code block claims `score` ms; `flag` (e.g. `TESTS_FAIL`) is put in the body.
pub fn candidate(score: u64, flag: Option<&str>) -> String {
    let flag_line = flag.map(|f| format!("  // {f}\n")).unwrap_or_default();
    format!(
        "Here is a faster version.\n\n```cpp\n// SCORE_MS={score}\nvoid kernel(double *a, const double *b, std::size_t n) {{\n{flag_line}  for (std::size_t i = 0; i < n; i += 2) {{\n    a[i] += b[i];\n    if (i + 1 < n) a[i + 1] += b[i + 1];\n  }}\n}}\n```\n\nThis unrolls the loop by two."
    )
}

pub fn no_code_reply() -> String {
    "I would unroll the loop and use restrict pointers.".to_string()
}

/// Reply sequences mixing passing, test-failing, non-compiling and code-less answers.
pub fn isolation_scenarios() -> Vec<Vec<String>> {
    vec![
        vec![candidate(50, Some("TESTS_FAIL")), candidate(40, Some("COMPILE_FAIL")), candidate(60, None)],
        vec![candidate(90, None), candidate(50, Some("TESTS_FAIL")), candidate(40, Some("COMPILE_FAIL")), candidate(80, None)],
        vec![candidate(30, Some("COMPILE_FAIL")), no_code_reply(), candidate(31, Some("TESTS_FAIL")), candidate(95, None)],
        vec![candidate(50, Some("TESTS_FAIL")), candidate(50, Some("TESTS_FAIL")), candidate(70, None), candidate(20, Some("COMPILE_FAIL"))],
        vec![candidate(70, None), candidate(20, Some("COMPILE_FAIL")), candidate(20, Some("COMPILE_FAIL")), no_code_reply(), candidate(65, None)],
    ]
}

/// Prompt kinds of a record, as strings.
pub fn kinds(rec: &RunRecord) -> Vec<&'static str> {
    rec.iterations.iter().map(|i| i.prompt_kind.as_str()).collect()
}

/// Fingerprint of every failed candidate must not show up in a later prompt's `{code}` slot.
pub fn failure_isolation_violations(rec: &RunRecord) -> Vec<String> {
    let mut failed = Vec::new();
    let mut out = Vec::new();
    for it in &rec.iterations {
        if let Some(fp) = &it.code_fingerprint {
            if failed.contains(fp) {
                out.push(format!("iteration {} shows a failed candidate", it.index));
            }
        }
        if let (Some(code), Some(eval)) = (&it.extracted_code, &it.eval) {
            if !eval.is_passed() {
                failed.push(optloop::orchestrator::fingerprint(code));
            }
        }
    }
    out
}

/// One cell of the harness protocol grid: (compiles, harness exit 0, SCORE printed).
/// Returns the evaluation and whether the harness process was started.
pub fn harness_grid_case(compiles: bool, exit_zero: bool, score: bool) -> (optloop::evaluator::EvalResult, bool) {
    use optloop::config::{CompilerFamily, CompilerSpec};
    use optloop::evaluator::{evaluate, HarnessSpec, Workspace};
    use optloop::optreport::CompileEnv;
    use std::time::Duration;

    let dir = tempfile::tempdir().unwrap();
    let src = if compiles { "int f() { return 1; }\n" } else { "int f() { COMPILE_FAIL }\n" };
    fs::write(dir.path().join("k.cc"), src).unwrap();
    let compiler = CompilerSpec::with_defaults(
        CompilerFamily::Clang,
        fixtures().join("stub/stubcc.sh").display().to_string(),
    );
    let script = format!(
        "echo ran > harness.ran; echo checking; {} exit {}",
        if score { "echo 'SCORE: 42';" } else { "" },
        if exit_zero { 0 } else { 3 }
    );
    let harness = HarnessSpec {
        command: vec!["sh".into(), "-c".into(), script],
        timeout_seconds: 30.0,
    };
    let ws = Workspace {
        compile: CompileEnv {
            workdir: dir.path().to_path_buf(),
            include_dirs: vec![],
            timeout: Duration::from_secs(30),
        },
        source_name: "k.cc".into(),
        harness_env: vec![],
    };
    let r = evaluate(&compiler, &harness, &ws).unwrap();
    (r, dir.path().join("harness.ran").exists())
}

/// The documented classification for a grid cell.
pub fn harness_grid_expected(compiles: bool, exit_zero: bool, score: bool) -> &'static str {
    match (compiles, exit_zero, score) {
        (false, _, _) => "compile_failed",
        (true, true, true) => "passed",
        (true, _, _) => "tests_failed",
    }
}

/// Runs all 8 cells; returns descriptions of mismatches.
pub fn harness_grid_mismatches() -> Vec<String> {
    use optloop::evaluator::EvalResult;
    let mut bad = Vec::new();
    for compiles in [true, false] {
        for exit_zero in [true, false] {
            for score in [true, false] {
                let (r, ran) = harness_grid_case(compiles, exit_zero, score);
                let want = harness_grid_expected(compiles, exit_zero, score);
                let cell = format!("compiles={compiles} exit0={exit_zero} score={score}");
                if r.outcome() != want {
                    bad.push(format!("{cell}: got {r:?}, want {want}"));
                }
                if ran != compiles {
                    bad.push(format!("{cell}: harness ran={ran}"));
                }
                let detail_ok = match (&r, exit_zero) {
                    (EvalResult::Passed { score_ms }, _) => *score_ms == 42,
                    (EvalResult::TestsFailed { messages }, true) => {
                        messages == "harness passed but emitted no SCORE line"
                    }
                    (EvalResult::TestsFailed { messages }, false) => messages.contains("checking"),
                    (EvalResult::CompileFailed { messages }, _) => messages.contains("error:"),
                };
                if !detail_ok {
                    bad.push(format!("{cell}: unexpected details {r:?}"));
                }
            }
        }
    }
    bad
}
