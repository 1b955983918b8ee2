//! Scripted provider for offline runs.
//!
//! A script is plain text; responses are separated by lines consisting of
//! exactly `---8<---`.

use std::fs;
use std::path::Path;

use super::{ChatProvider, Conversation, LlmError, Usage};

pub const REPLAY_SEPARATOR: &str = "---8<---";

pub fn parse_replay_script(text: &str) -> Vec<String> {
    let text = text.replace("\r\n", "\n");
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.split('\n') {
        if line == REPLAY_SEPARATOR {
            out.push(current.join("\n"));
            current.clear();
        } else {
            current.push(line);
        }
    }
    // The file's own final newline leaves one empty piece behind.
    if current.last() == Some(&"") {
        current.pop();
    }
    if !current.is_empty() {
        out.push(current.join("\n"));
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReplayProvider {
    responses: Vec<String>,
    cursor: usize,
}

impl ReplayProvider {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses,
            cursor: 0,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|source| LlmError::ReplayFile {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(parse_replay_script(&text)))
    }

    pub fn served(&self) -> usize {
        self.cursor
    }
}

/// Token estimate used when no provider reports counts: characters / 4.
pub(crate) fn estimate_tokens(text: &str) -> u64 {
    text.chars().count() as u64 / 4
}

impl ChatProvider for ReplayProvider {
    fn send(&mut self, conv: &Conversation) -> Result<(String, Usage), LlmError> {
        let response = self
            .responses
            .get(self.cursor)
            .cloned()
            .ok_or(LlmError::ReplayExhausted {
                served: self.cursor,
            })?;
        self.cursor += 1;
        let input_chars: String = conv.messages().iter().map(|m| m.content.as_str()).collect();
        let usage = Usage {
            input_tokens: estimate_tokens(&input_chars),
            output_tokens: estimate_tokens(&response),
        };
        Ok((response, usage))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_splits_on_separator_lines() {
        let s = "OK1\n---8<---\nOK2\nsecond line\n---8<---\n";
        assert_eq!(parse_replay_script(s), vec!["OK1", "OK2\nsecond line"]);
        assert_eq!(parse_replay_script("only\n"), vec!["only"]);
        // a separator must be the whole line
        assert_eq!(parse_replay_script("a ---8<---\nb"), vec!["a ---8<---\nb"]);
        assert!(parse_replay_script("").is_empty());
    }

    #[test]
    fn serves_in_order_then_exhausts() {
        let mut p = ReplayProvider::new(vec!["OK1".into(), "OK2".into()]);
        let mut c = Conversation::with_system("s");
        c.push_user("hello world!").unwrap();
        let (r1, u1) = p.send(&c).unwrap();
        let (r2, _) = p.send(&c).unwrap();
        assert_eq!((r1.as_str(), r2.as_str()), ("OK1", "OK2"));
        assert_eq!(u1.input_tokens, 13 / 4);
        assert!(matches!(p.send(&c), Err(LlmError::ReplayExhausted { served: 2 })));
    }

    #[test]
    fn identical_scripts_give_identical_transcripts() {
        let script = vec!["a".to_string(), "bb".into(), "ccc".into()];
        let run = |mut p: ReplayProvider| {
            let mut c = Conversation::with_system("s");
            for i in 0..3 {
                c.push_user(format!("q{i}")).unwrap();
                let (r, _) = p.send(&c).unwrap();
                c.push_assistant(r).unwrap();
            }
            serde_json::to_string(&c).unwrap()
        };
        assert_eq!(run(ReplayProvider::new(script.clone())), run(ReplayProvider::new(script)));
    }
}
