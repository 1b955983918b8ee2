//! HTTP chat-completion dialects.
//!
//! OpenAI-style endpoints carry the system prompt inside `messages` and
//! authenticate with a bearer token; Anthropic-style endpoints take it as a
//! top-level `system` field and use an `x-api-key` header.

use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client as HttpClient, RequestBuilder};
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{ChatProvider, Conversation, LlmError, ProviderSpec, Usage};

pub const MAX_RATE_LIMIT_RETRIES: u32 = 3;
const ANTHROPIC_VERSION: &str = "2023-06-01";

#[derive(Clone)]
pub struct HttpSettings {
    pub endpoint: String,
    pub model: String,
    pub api_key: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_timeout: Duration,
    /// First retry delay; doubles on each further 429.
    pub backoff_base: Duration,
}

impl std::fmt::Debug for HttpSettings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpSettings")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &"<redacted>")
            .finish_non_exhaustive()
    }
}

impl HttpSettings {
    pub fn from_spec(spec: &ProviderSpec) -> Result<Self, LlmError> {
        let var = spec
            .api_key_env
            .as_deref()
            .ok_or_else(|| LlmError::Auth("provider.api_key_env is not configured".into()))?;
        let api_key = std::env::var(var)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LlmError::Auth(format!("environment variable {var} is not set")))?;
        Ok(Self {
            endpoint: spec.endpoint.clone().unwrap_or_default(),
            model: spec.model.clone().unwrap_or_default(),
            api_key,
            temperature: spec.temperature,
            max_tokens: spec.max_tokens,
            request_timeout: Duration::from_secs(600),
            backoff_base: Duration::from_secs(1),
        })
    }
}

fn build_client(settings: &HttpSettings) -> Result<HttpClient, LlmError> {
    HttpClient::builder()
        .timeout(settings.request_timeout)
        .build()
        .map_err(|e| LlmError::Transport(e.to_string()))
}

fn retry_after(resp: &reqwest::blocking::Response) -> Option<Duration> {
    resp.headers()
        .get(reqwest::header::RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<u64>()
        .ok()
        .map(Duration::from_secs)
}

/// Sends the request, retrying 429s with exponential backoff before giving up.
fn post_json(settings: &HttpSettings, make: impl Fn() -> RequestBuilder) -> Result<Value, LlmError> {
    let mut attempt = 0u32;
    loop {
        let resp = make().send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            let after = retry_after(&resp);
            if attempt >= MAX_RATE_LIMIT_RETRIES {
                return Err(LlmError::RateLimited { retry_after: after });
            }
            thread::sleep(settings.backoff_base * 2u32.pow(attempt));
            attempt += 1;
            continue;
        }
        let body = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(LlmError::Auth(format!("HTTP {}: {body}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(LlmError::Provider {
                status: status.as_u16(),
                body,
            });
        }
        return serde_json::from_str(&body)
            .map_err(|e| LlmError::MalformedResponse(format!("{e}: {body}")));
    }
}

fn count(v: &Value, key: &str) -> u64 {
    v.get(key).and_then(Value::as_u64).unwrap_or(0)
}

pub struct OpenAiProvider {
    settings: HttpSettings,
    http: HttpClient,
}

impl OpenAiProvider {
    pub fn new(settings: HttpSettings) -> Result<Self, LlmError> {
        let http = build_client(&settings)?;
        Ok(Self { settings, http })
    }

    pub fn request_body(&self, conv: &Conversation) -> Value {
        let messages: Vec<Value> = conv
            .messages()
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        json!({
            "model": self.settings.model,
            "temperature": self.settings.temperature,
            "max_tokens": self.settings.max_tokens,
            "messages": messages,
        })
    }
}

impl ChatProvider for OpenAiProvider {
    fn send(&mut self, conv: &Conversation) -> Result<(String, Usage), LlmError> {
        let body = self.request_body(conv);
        let v = post_json(&self.settings, || {
            self.http
                .post(&self.settings.endpoint)
                .bearer_auth(&self.settings.api_key)
                .json(&body)
        })?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::MalformedResponse(format!("no choices[0].message.content in {v}")))?;
        let usage = v.get("usage").map_or(Usage::default(), |u| Usage {
            input_tokens: count(u, "prompt_tokens"),
            output_tokens: count(u, "completion_tokens"),
        });
        Ok((text.to_string(), usage))
    }
}

pub struct AnthropicProvider {
    settings: HttpSettings,
    http: HttpClient,
}

impl AnthropicProvider {
    pub fn new(settings: HttpSettings) -> Result<Self, LlmError> {
        let http = build_client(&settings)?;
        Ok(Self { settings, http })
    }

    pub fn request_body(&self, conv: &Conversation) -> Value {
        let messages: Vec<Value> = conv
            .turns()
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": self.settings.model,
            "temperature": self.settings.temperature,
            "max_tokens": self.settings.max_tokens,
            "messages": messages,
        });
        if let Some(system) = conv.system() {
            body["system"] = Value::String(system.to_string());
        }
        body
    }
}

impl ChatProvider for AnthropicProvider {
    fn send(&mut self, conv: &Conversation) -> Result<(String, Usage), LlmError> {
        let body = self.request_body(conv);
        let v = post_json(&self.settings, || {
            self.http
                .post(&self.settings.endpoint)
                .header("x-api-key", &self.settings.api_key)
                .header("anthropic-version", ANTHROPIC_VERSION)
                .json(&body)
        })?;
        let text = v
            .get("content")
            .and_then(Value::as_array)
            .and_then(|parts| {
                parts
                    .iter()
                    .find(|p| p.get("type").and_then(Value::as_str) == Some("text"))
            })
            .and_then(|p| p.get("text"))
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::MalformedResponse(format!("no text content part in {v}")))?;
        let usage = v.get("usage").map_or(Usage::default(), |u| Usage {
            input_tokens: count(u, "input_tokens"),
            output_tokens: count(u, "output_tokens"),
        });
        Ok((text.to_string(), usage))
    }
}
