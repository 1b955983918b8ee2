//! Region handling for the target source file.
//!
//! A source text is viewed as a sequence of `\n`-separated lines. The final
//! newline, when present, terminates the last line and is not a line of its
//! own. Snippets are lines joined with `\n` and never carry a trailing
//! terminator, so `"a\n"` as a snippet is the two lines `a` and the empty line.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SourceError {
    #[error("marker not found: {0}")]
    MarkerNotFound(MarkerKind),
    #[error("region between markers is empty")]
    EmptyRegion,
    #[error("interval {start}..={end} is outside a file of {line_count} lines")]
    IntervalOutOfBounds {
        start: usize,
        end: usize,
        line_count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    Begin,
    End,
}

impl fmt::Display for MarkerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarkerKind::Begin => "begin",
            MarkerKind::End => "end",
        })
    }
}

/// The user-declared part of the target that the model may rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Region {
    WholeFile,
    Lines {
        start_line: usize,
        end_line: usize,
    },
    Markers {
        begin_marker: String,
        end_marker: String,
    },
}

impl Region {
    /// Returns one message per violated invariant.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Region::WholeFile => {}
            Region::Lines {
                start_line,
                end_line,
            } => {
                if *start_line < 1 {
                    out.push("target.region.start_line ≥ 1".to_string());
                }
                if start_line > end_line {
                    out.push("target.region.start_line ≤ target.region.end_line".to_string());
                }
            }
            Region::Markers {
                begin_marker,
                end_marker,
            } => {
                if begin_marker.is_empty() {
                    out.push("target.region.begin_marker is non-empty".to_string());
                }
                if end_marker.is_empty() {
                    out.push("target.region.end_marker is non-empty".to_string());
                }
                if begin_marker == end_marker {
                    out.push("target.region.begin_marker ≠ target.region.end_marker".to_string());
                }
            }
        }
        out
    }
}

/// Inclusive, 1-based line interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

impl LineSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn contains(&self, line: usize) -> bool {
        self.start <= line && line <= self.end
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

impl fmt::Display for LineSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

/// One version of the target: the full text plus where the snippet lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceVersion {
    /// 0 is the original file.
    pub iteration_index: usize,
    pub full_text: String,
    pub snippet: String,
    pub region_lines: LineSpan,
}

impl SourceVersion {
    /// Builds the original version by locating `region` in `full_text`.
    pub fn original(full_text: String, region: &Region) -> Result<Self, SourceError> {
        let region_lines = locate_region(&full_text, region)?;
        let snippet = extract_snippet(&full_text, region_lines)?;
        Ok(Self {
            iteration_index: 0,
            full_text,
            snippet,
            region_lines,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineEnding {
    Lf,
    CrLf,
}

/// Text as read from disk, normalized to `\n`, remembering the original style.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceText {
    pub text: String,
    pub ending: LineEnding,
}

impl SourceText {
    /// `\r\n` is restored on write only when every line break in the input used it.
    pub fn from_raw(raw: &str) -> Self {
        let lf = raw.matches('\n').count();
        let crlf = raw.matches("\r\n").count();
        let ending = if lf > 0 && lf == crlf {
            LineEnding::CrLf
        } else {
            LineEnding::Lf
        };
        let text = if crlf > 0 {
            raw.replace("\r\n", "\n")
        } else {
            raw.to_string()
        };
        Self { text, ending }
    }

    pub fn render(&self, text: &str) -> String {
        match self.ending {
            LineEnding::Lf => text.to_string(),
            LineEnding::CrLf => text.replace('\n', "\r\n"),
        }
    }
}

/// Splits into lines; a trailing `\n` terminates the last line.
fn split_lines(text: &str) -> (Vec<&str>, bool) {
    if text.is_empty() {
        return (Vec::new(), false);
    }
    let trailing = text.ends_with('\n');
    let body = if trailing {
        &text[..text.len() - 1]
    } else {
        text
    };
    (body.split('\n').collect(), trailing)
}

pub fn line_count(text: &str) -> usize {
    split_lines(text).0.len()
}

pub fn locate_region(full_text: &str, region: &Region) -> Result<LineSpan, SourceError> {
    let (lines, _) = split_lines(full_text);
    let n = lines.len();
    match region {
        Region::WholeFile => {
            if n == 0 {
                return Err(SourceError::EmptyRegion);
            }
            Ok(LineSpan::new(1, n))
        }
        Region::Lines {
            start_line,
            end_line,
        } => {
            let end = (*end_line).min(n);
            if *start_line < 1 || *start_line > end {
                return Err(SourceError::EmptyRegion);
            }
            Ok(LineSpan::new(*start_line, end))
        }
        Region::Markers {
            begin_marker,
            end_marker,
        } => {
            let begin = lines
                .iter()
                .position(|l| l.contains(begin_marker.as_str()))
                .ok_or(SourceError::MarkerNotFound(MarkerKind::Begin))?;
            let end = lines[begin + 1..]
                .iter()
                .position(|l| l.contains(end_marker.as_str()))
                .map(|off| begin + 1 + off)
                .ok_or(SourceError::MarkerNotFound(MarkerKind::End))?;
            // `begin` and `end` are 0-based marker lines; the region sits strictly between.
            if end == begin + 1 {
                return Err(SourceError::EmptyRegion);
            }
            Ok(LineSpan::new(begin + 2, end))
        }
    }
}

pub fn extract_snippet(full_text: &str, span: LineSpan) -> Result<String, SourceError> {
    let (lines, _) = split_lines(full_text);
    if span.start < 1 || span.end > lines.len() || span.start > span.end {
        return Err(SourceError::IntervalOutOfBounds {
            start: span.start,
            end: span.end,
            line_count: lines.len(),
        });
    }
    Ok(lines[span.start - 1..span.end].join("\n"))
}

/// Replaces `prev.region_lines` with the lines of `new_snippet`.
///
/// An empty snippet is one empty line, so every region keeps at least one line.
pub fn splice_snippet(prev: &SourceVersion, new_snippet: &str) -> SourceVersion {
    let (lines, trailing) = split_lines(&prev.full_text);
    let span = prev.region_lines;
    let new_lines: Vec<&str> = new_snippet.split('\n').collect();

    let mut out: Vec<&str> = Vec::with_capacity(lines.len() + new_lines.len());
    out.extend_from_slice(&lines[..span.start - 1]);
    out.extend_from_slice(&new_lines);
    out.extend_from_slice(&lines[span.end..]);

    let mut full_text = out.join("\n");
    // A final empty line only survives if it is explicitly terminated.
    if trailing || out.last() == Some(&"") {
        full_text.push('\n');
    }
    SourceVersion {
        iteration_index: prev.iteration_index + 1,
        full_text,
        snippet: new_snippet.to_string(),
        region_lines: LineSpan::new(span.start, span.start + new_lines.len() - 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockPick {
    First,
    #[default]
    Last,
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Contents of the last complete fenced block in a model response.
pub fn extract_code_block(response: &str) -> Option<String> {
    extract_code_block_with(response, BlockPick::Last)
}

pub fn extract_code_block_with(response: &str, pick: BlockPick) -> Option<String> {
    let mut blocks: Vec<String> = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in response.lines() {
        if is_fence(line) {
            match current.take() {
                Some(body) => {
                    blocks.push(body.join("\n"));
                    if pick == BlockPick::First {
                        break;
                    }
                }
                None => current = Some(Vec::new()),
            }
        } else if let Some(body) = current.as_mut() {
            body.push(line);
        }
    }
    match pick {
        BlockPick::First => blocks.into_iter().next(),
        BlockPick::Last => blocks.pop(),
    }
}
