//! Speedups per run and the cross-run summary (max, mean, improving-run count).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::EvalResult;
use crate::orchestrator::{select_best, PromptKind, RunRecord};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("zero score (baseline {baseline_ms} ms, best {best_ms} ms); check the harness timing")]
    ZeroScore { baseline_ms: u64, best_ms: u64 },
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("internal error: run {run_index} has speedup {speedup} < 1.0")]
    SpeedupBelowOne { run_index: usize, speedup: f64 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub fn speedup(baseline_ms: u64, best_ms: u64) -> Result<f64, ReportError> {
    if baseline_ms == 0 || best_ms == 0 {
        return Err(ReportError::ZeroScore { baseline_ms, best_ms });
    }
    Ok(baseline_ms as f64 / best_ms as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub index: usize,
    pub prompt_kind: PromptKind,
    /// `passed`, `compile_failed`, `tests_failed` or `no_code_block`.
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpeedup {
    pub run_index: usize,
    pub baseline_ms: u64,
    pub best_ms: u64,
    pub speedup: f64,
    pub improved: bool,
    pub iterations: Vec<IterationSummary>,
    pub cost_usd: f64,
    #[serde(default)]
    pub concurrent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub max_speedup: f64,
    pub avg_speedup: f64,
    pub num_improved: usize,
    pub total_cost_usd: f64,
    #[serde(rename = "runs")]
    pub per_run: Vec<RunSpeedup>,
}

fn run_speedup(run: &RunRecord) -> Result<RunSpeedup, ReportError> {
    let best = select_best(run);
    let ratio = speedup(run.baseline_score_ms, best.score_ms)?;
    if ratio < 1.0 {
        return Err(ReportError::SpeedupBelowOne {
            run_index: run.run_index,
            speedup: ratio,
        });
    }
    Ok(RunSpeedup {
        run_index: run.run_index,
        baseline_ms: run.baseline_score_ms,
        best_ms: best.score_ms,
        speedup: ratio,
        improved: best.score_ms < run.baseline_score_ms,
        iterations: run
            .iterations
            .iter()
            .map(|it| IterationSummary {
                index: it.index,
                prompt_kind: it.prompt_kind,
                outcome: it
                    .eval
                    .as_ref()
                    .map_or("no_code_block", EvalResult::outcome)
                    .to_string(),
                score_ms: it.eval.as_ref().and_then(EvalResult::score),
            })
            .collect(),
        cost_usd: run.total_cost_usd,
        concurrent: run.concurrent,
    })
}

pub fn aggregate(runs: &[RunRecord]) -> Result<RunSummary, ReportError> {
    if runs.is_empty() {
        return Err(ReportError::NoRuns);
    }
    let per_run = runs.iter().map(run_speedup).collect::<Result<Vec<_>, _>>()?;
    let max_speedup = per_run.iter().map(|r| r.speedup).fold(f64::MIN, f64::max);
    let avg_speedup = per_run.iter().map(|r| r.speedup).sum::<f64>() / per_run.len() as f64;
    Ok(RunSummary {
        max_speedup,
        avg_speedup,
        num_improved: per_run.iter().filter(|r| r.improved).count(),
        total_cost_usd: per_run.iter().map(|r| r.cost_usd).sum(),
        per_run,
    })
}

/// `| Max | Avg | Num |` row: one decimal for Max, two for Avg.
pub fn table_row(summary: &RunSummary) -> String {
    format!(
        "| {:.1} | {:.2} | {} |",
        summary.max_speedup, summary.avg_speedup, summary.num_improved
    )
}

pub fn render_markdown(summary: &RunSummary) -> String {
    let mut out = String::from("# Optimization summary\n\n| Max | Avg | Num |\n|-----|-----|-----|\n");
    out.push_str(&table_row(summary));
    out.push_str("\n\n");
    if summary.per_run.iter().any(|r| r.concurrent) {
        out.push_str("> Warning: runs executed concurrently; timings may be noisy.\n\n");
    }
    out.push_str(&format!("Total cost: {:.4} USD\n\n## Runs\n\n", summary.total_cost_usd));
    for r in &summary.per_run {
        let history: Vec<String> = r
            .iterations
            .iter()
            .map(|it| match it.score_ms {
                Some(s) => format!("{}:{}({s})", it.prompt_kind, it.outcome),
                None => format!("{}:{}", it.prompt_kind, it.outcome),
            })
            .collect();
        out.push_str(&format!(
            "- run {}: baseline {} ms, best {} ms, speedup {:.2} | {}\n",
            r.run_index,
            r.baseline_ms,
            r.best_ms,
            r.speedup,
            if history.is_empty() {
                "(no iterations)".to_string()
            } else {
                history.join(" -> ")
            }
        ));
    }
    out
}

pub fn write_summary(summary: &RunSummary, out_dir: &Path) -> Result<(PathBuf, PathBuf), ReportError> {
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let json_path = out_dir.join("summary.json");
    let md_path = out_dir.join("summary.md");
    let json = serde_json::to_string_pretty(summary).map_err(|source| ReportError::Json {
        path: json_path.clone(),
        source,
    })?;
    for (path, body) in [(&json_path, json), (&md_path, render_markdown(summary))] {
        fs::write(path, body).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok((json_path, md_path))
}

pub fn read_summary(path: &Path) -> Result<RunSummary, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every `run*/record.json` below `out_dir`, ordered by run index.
pub fn load_run_records(out_dir: &Path) -> Result<Vec<RunRecord>, ReportError> {
    let entries = fs::read_dir(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with("run") {
            continue;
        }
        let path = entry.path().join("record.json");
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        let rec: RunRecord = serde_json::from_str(&text).map_err(|source| ReportError::Json {
            path: path.clone(),
            source,
        })?;
        records.push(rec);
    }
    records.sort_by_key(|r| r.run_index);
    Ok(records)
}
