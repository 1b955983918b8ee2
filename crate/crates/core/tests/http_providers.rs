//! Both HTTP dialects against a local capture server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use optloop::llm::{
    AnthropicProvider, ChatProvider, Client, Conversation, HttpSettings, LlmError, OpenAiProvider, ProviderKind,
    ProviderSpec,
};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Captured {
    headers: Vec<(String, String)>,
    body: Value,
}

impl Captured {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Serves the scripted `(status, body)` replies in order, one connection each.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                if let Some((k, v)) = l.split_once(':') {
                    headers.push((k.trim().to_string(), v.trim().to_string()));
                }
            }
            let len: usize = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                .map(|(_, v)| v.parse().unwrap())
                .unwrap_or(0);
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                headers,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let reason = match status {
                200 => "OK",
                401 => "Unauthorized",
                429 => "Too Many Requests",
                _ => "Error",
            };
            let resp = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn settings(endpoint: String) -> HttpSettings {
    HttpSettings {
        endpoint,
        model: "test-model".into(),
        api_key: "sk-test-123".into(),
        temperature: 0.2,
        max_tokens: 512,
        request_timeout: Duration::from_secs(10),
        backoff_base: Duration::from_millis(5),
    }
}

fn conversation() -> Conversation {
    let mut c = Conversation::with_system("You are an expert.");
    c.push_user("first prompt").unwrap();
    c.push_assistant("first answer").unwrap();
    c.push_user("second prompt").unwrap();
    c
}

fn openai_ok(text: &str) -> (u16, String) {
    (
        200,
        json!({"choices": [{"message": {"role": "assistant", "content": text}}],
               "usage": {"prompt_tokens": 120, "completion_tokens": 30}})
        .to_string(),
    )
}

#[test]
fn openai_request_and_response() {
    let (url, seen) = serve(vec![openai_ok("```cpp\nint x;\n```")]);
    let mut p = OpenAiProvider::new(settings(url)).unwrap();
    let (text, usage) = p.send(&conversation()).unwrap();
    assert_eq!(text, "```cpp\nint x;\n```");
    assert_eq!((usage.input_tokens, usage.output_tokens), (120, 30));

    let req = seen.lock().unwrap()[0].clone();
    assert_eq!(req.header("authorization"), Some("Bearer sk-test-123"));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["max_tokens"], 512);
    let msgs = req.body["messages"].as_array().unwrap();
    let roles: Vec<_> = msgs.iter().map(|m| m["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["system", "user", "assistant", "user"]);
    assert_eq!(msgs[3]["content"], "second prompt");
    assert!(!req.body.to_string().contains("sk-test-123"));
}

#[test]
fn anthropic_request_and_response() {
    let reply = json!({"content": [{"type": "thinking", "thinking": "hmm"}, {"type": "text", "text": "done"}],
                       "usage": {"input_tokens": 11, "output_tokens": 7}});
    let (url, seen) = serve(vec![(200, reply.to_string())]);
    let mut p = AnthropicProvider::new(settings(url)).unwrap();
    let (text, usage) = p.send(&conversation()).unwrap();
    assert_eq!(text, "done");
    assert_eq!((usage.input_tokens, usage.output_tokens), (11, 7));

    let req = seen.lock().unwrap()[0].clone();
    assert_eq!(req.header("x-api-key"), Some("sk-test-123"));
    assert_eq!(req.header("anthropic-version"), Some("2023-06-01"));
    assert_eq!(req.body["system"], "You are an expert.");
    let roles: Vec<_> = req.body["messages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["user", "assistant", "user"]);
}

#[test]
fn rate_limit_retries_then_succeeds() {
    let limited = (429, r#"{"error":"slow down"}"#.to_string());
    let (url, seen) = serve(vec![limited.clone(), limited, openai_ok("ok")]);
    let mut p = OpenAiProvider::new(settings(url)).unwrap();
    assert_eq!(p.send(&conversation()).unwrap().0, "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn rate_limit_gives_up_after_three_retries() {
    let limited = (429, "{}".to_string());
    let (url, seen) = serve(vec![limited; 4]);
    let mut p = OpenAiProvider::new(settings(url)).unwrap();
    assert!(matches!(p.send(&conversation()), Err(LlmError::RateLimited { .. })));
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn auth_and_server_errors() {
    let (url, _) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let mut p = OpenAiProvider::new(settings(url)).unwrap();
    assert!(matches!(p.send(&conversation()), Err(LlmError::Auth(_))));

    let (url, _) = serve(vec![(500, "upstream exploded".into())]);
    let mut p = AnthropicProvider::new(settings(url)).unwrap();
    match p.send(&conversation()) {
        Err(LlmError::Provider { status, body }) => assert_eq!((status, body.as_str()), (500, "upstream exploded")),
        other => panic!("{other:?}"),
    }

    let (url, _) = serve(vec![(200, r#"{"choices": []}"#.into())]);
    let mut p = OpenAiProvider::new(settings(url)).unwrap();
    assert!(matches!(p.send(&conversation()), Err(LlmError::MalformedResponse(_))));
}

#[test]
fn missing_key_fails_before_traffic() {
    let spec = ProviderSpec {
        kind: ProviderKind::OpenaiCompatible,
        endpoint: Some("http://127.0.0.1:9/never".into()),
        model: Some("m".into()),
        api_key_env: Some("OPTLOOP_TEST_KEY_THAT_IS_NOT_SET".into()),
        ..ProviderSpec::replay("unused")
    };
    assert!(matches!(Client::from_spec(&spec), Err(LlmError::Auth(_))));
}
