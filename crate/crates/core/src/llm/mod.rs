//! Chat-completion client.
//!
//! Every call transmits the whole conversation. Growing the history is the
//! caller's job; [`Client::complete`] only reads it.

mod http;
mod replay;

use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{AnthropicProvider, HttpSettings, OpenAiProvider};
pub use replay::{parse_replay_script, ReplayProvider, REPLAY_SEPARATOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConversationError {
    #[error("expected a {expected} message next, got {got}")]
    OutOfOrder { expected: Role, got: Role },
    #[error("{0} messages must not be empty")]
    EmptyContent(Role),
    #[error("a system message may only appear first")]
    MisplacedSystem,
}

/// Optional leading system message, then strictly alternating user/assistant turns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    messages: Vec<Message>,
}

impl Conversation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_system(system: impl Into<String>) -> Self {
        Self {
            messages: vec![Message::new(Role::System, system)],
        }
    }

    pub fn from_messages(messages: Vec<Message>) -> Result<Self, ConversationError> {
        let mut conv = Conversation::new();
        for (i, m) in messages.into_iter().enumerate() {
            if m.role == Role::System {
                if i != 0 {
                    return Err(ConversationError::MisplacedSystem);
                }
                conv.messages.push(m);
            } else {
                conv.push(m)?;
            }
        }
        Ok(conv)
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn system(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    /// Messages after the system prompt.
    pub fn turns(&self) -> &[Message] {
        match self.messages.first() {
            Some(m) if m.role == Role::System => &self.messages[1..],
            _ => &self.messages,
        }
    }

    pub fn last_role(&self) -> Option<Role> {
        self.messages.last().map(|m| m.role)
    }

    fn expected_next(&self) -> Role {
        match self.turns().last() {
            Some(m) if m.role == Role::User => Role::Assistant,
            _ => Role::User,
        }
    }

    pub fn push(&mut self, m: Message) -> Result<(), ConversationError> {
        if m.role == Role::System {
            return Err(ConversationError::MisplacedSystem);
        }
        let expected = self.expected_next();
        if m.role != expected {
            return Err(ConversationError::OutOfOrder {
                expected,
                got: m.role,
            });
        }
        if m.content.is_empty() {
            return Err(ConversationError::EmptyContent(m.role));
        }
        self.messages.push(m);
        Ok(())
    }

    pub fn push_user(&mut self, content: impl Into<String>) -> Result<(), ConversationError> {
        self.push(Message::new(Role::User, content))
    }

    pub fn push_assistant(&mut self, content: impl Into<String>) -> Result<(), ConversationError> {
        self.push(Message::new(Role::Assistant, content))
    }

    /// Markdown transcript with role headings.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str("## ");
            out.push_str(m.role.as_str());
            out.push_str("\n\n");
            out.push_str(&m.content);
            if !m.content.ends_with('\n') {
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    OpenaiCompatible,
    AnthropicCompatible,
    Replay,
}

impl ProviderKind {
    /// Accepts `openai_compatible` as well as `openai-compatible`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "openai_compatible" => Some(Self::OpenaiCompatible),
            "anthropic_compatible" => Some(Self::AnthropicCompatible),
            "replay" => Some(Self::Replay),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::OpenaiCompatible => "openai_compatible",
            Self::AnthropicCompatible => "anthropic_compatible",
            Self::Replay => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub replay_file: Option<PathBuf>,
    pub price_per_million_input: f64,
    pub price_per_million_output: f64,
}

impl ProviderSpec {
    pub fn replay(file: impl Into<PathBuf>) -> Self {
        Self {
            kind: ProviderKind::Replay,
            endpoint: None,
            model: None,
            api_key_env: None,
            temperature: crate::config::DEFAULT_TEMPERATURE,
            max_tokens: crate::config::DEFAULT_MAX_TOKENS,
            replay_file: Some(file.into()),
            price_per_million_input: 0.0,
            price_per_million_output: 0.0,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let blank = |v: &Option<String>| v.as_deref().map_or(true, |s| s.trim().is_empty());
        match self.kind {
            ProviderKind::Replay => {
                if self.replay_file.is_none() {
                    out.push("provider.replay_file is required for replay".into());
                }
            }
            ProviderKind::OpenaiCompatible | ProviderKind::AnthropicCompatible => {
                for (key, v) in [
                    ("provider.endpoint", &self.endpoint),
                    ("provider.model", &self.model),
                    ("provider.api_key_env", &self.api_key_env),
                ] {
                    if blank(v) {
                        out.push(format!("{key} is required for {}", self.kind.as_str()));
                    }
                }
            }
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            out.push(format!("provider.temperature in [0,2] (got {})", self.temperature));
        }
        if self.max_tokens < 1 {
            out.push("provider.max_tokens ≥ 1".into());
        }
        if !(self.price_per_million_input >= 0.0 && self.price_per_million_output >= 0.0) {
            out.push("provider prices are non-negative".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::Add for Usage {
    type Output = Usage;
    fn add(self, o: Usage) -> Usage {
        Usage {
            input_tokens: self.input_tokens + o.input_tokens,
            output_tokens: self.output_tokens + o.output_tokens,
        }
    }
}

pub fn cost_usd(usage: Usage, spec: &ProviderSpec) -> f64 {
    usage.input_tokens as f64 * spec.price_per_million_input / 1e6
        + usage.output_tokens as f64 * spec.price_per_million_output / 1e6
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    Usage(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited{}", .retry_after.map(|d| format!(" (retry after {}s)", d.as_secs())).unwrap_or_default())]
    RateLimited { retry_after: Option<Duration> },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("replay script exhausted after {served} responses")]
    ReplayExhausted { served: usize },
    #[error("cannot read replay script {}: {source}", path.display())]
    ReplayFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One chat-completion backend.
pub trait ChatProvider: Send {
    fn send(&mut self, conv: &Conversation) -> Result<(String, Usage), LlmError>;
}

/// A provider bound to its spec, enforcing request preconditions.
pub struct Client {
    spec: ProviderSpec,
    provider: Box<dyn ChatProvider>,
}

impl Client {
    /// Fails with [`LlmError::Auth`] before any traffic when the key variable is unset.
    pub fn from_spec(spec: &ProviderSpec) -> Result<Self, LlmError> {
        let provider: Box<dyn ChatProvider> = match spec.kind {
            ProviderKind::Replay => {
                let path = spec
                    .replay_file
                    .as_ref()
                    .ok_or_else(|| LlmError::Usage("replay provider without replay_file".into()))?;
                Box::new(ReplayProvider::from_file(path)?)
            }
            ProviderKind::OpenaiCompatible => Box::new(OpenAiProvider::new(HttpSettings::from_spec(spec)?)?),
            ProviderKind::AnthropicCompatible => {
                Box::new(AnthropicProvider::new(HttpSettings::from_spec(spec)?)?)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            provider,
        })
    }

    pub fn with_provider(spec: ProviderSpec, provider: Box<dyn ChatProvider>) -> Self {
        Self { spec, provider }
    }

    pub fn spec(&self) -> &ProviderSpec {
        &self.spec
    }

    pub fn complete(&mut self, conv: &Conversation) -> Result<(Message, Usage), LlmError> {
        if conv.last_role() != Some(Role::User) {
            return Err(LlmError::Usage(
                "conversation must end with a user message".into(),
            ));
        }
        let (text, usage) = self.provider.send(conv)?;
        if text.is_empty() {
            return Err(LlmError::MalformedResponse("empty assistant message".into()));
        }
        Ok((Message::new(Role::Assistant, text), usage))
    }

    pub fn cost(&self, usage: Usage) -> f64 {
        cost_usd(usage, &self.spec)
    }
}
