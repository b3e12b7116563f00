//! Chat-completions over HTTP (`POST {url}` with `{model, messages, temperature, max_tokens}`).

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError, Usage};
use crate::message::ContentPart;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff_ms: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub url: String,
    /// Name of the env var holding the bearer token; no auth header when unset.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_s")]
    pub request_timeout_s: u64,
}

fn default_timeout_s() -> u64 {
    120
}

pub struct HttpBackend {
    id: String,
    config: HttpConfig,
    token: Option<String>,
    // blocking clients must not be built inside an async context, so build on first use
    client: OnceLock<reqwest::blocking::Client>,
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, config: HttpConfig) -> Result<Self, GatewayError> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingCredentials(var.clone()))?),
            None => None,
        };
        Ok(Self { id: id.into(), config, token, client: OnceLock::new() })
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(self.config.request_timeout_s))
                .build()
                .expect("http client")
        })
    }

    fn attempt(&self, body: &Value) -> Result<Value, Attempt> {
        let mut builder = self.client().post(&self.config.url).json(body);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let resp = builder.send().map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {}: {}", status.as_u16(), truncate(&text))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(GatewayError::Http { status: status.as_u16(), body: truncate(&text) }));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(GatewayError::MalformedResponse(e.to_string())))
    }
}

fn truncate(text: &str) -> String {
    text.chars().take(512).collect()
}

pub(crate) fn wire_body(request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text(t) => json!({"type": "text", "text": t}),
                    ContentPart::Image(img) => json!({"type": "image_url", "image_url": {"url": img.data_url()}}),
                })
                .collect();
            json!({"role": m.role.as_str(), "content": content})
        })
        .collect();
    json!({
        "model": request.backend_model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    })
}

pub(crate) fn parse_wire_response(body: &Value) -> Result<(String, Usage, bool), GatewayError> {
    let choice =
        body.pointer("/choices/0").ok_or_else(|| GatewayError::MalformedResponse("missing choices[0]".into()))?;
    let content = choice
        .pointer("/message/content")
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => {
            parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join("")
        }
        Value::Null => String::new(),
        other => return Err(GatewayError::MalformedResponse(format!("unexpected content {other}"))),
    };
    let usage = Usage {
        prompt_tokens: body.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: body.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    let truncated = choice.get("finish_reason").and_then(Value::as_str) == Some("length");
    Ok((text, usage, truncated))
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = wire_body(request);
        let started = Instant::now();
        let attempts = self.config.retry.attempts.max(1);
        let mut backoff = Duration::from_millis(self.config.retry.initial_backoff_ms);
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(value) => {
                    let (text, usage, truncated) = parse_wire_response(&value)?;
                    return Ok(ChatResponse {
                        text,
                        usage,
                        latency_s: started.elapsed().as_secs_f64(),
                        backend_id: self.id.clone(),
                        truncated,
                    });
                }
                Err(Attempt::Fatal(err)) => return Err(err),
                Err(Attempt::Retry(msg)) => {
                    tracing::warn!(attempt, tag = %request.tag, error = %msg, "chat request failed");
                    last_error = msg;
                    if attempt < attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(GatewayError::BackendUnavailable { attempts, last_error })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{ChatMessage, ImageData, Role};

    #[test]
    fn wire_format() {
        let req = ChatRequest {
            backend_model: "gpt-x".into(),
            messages: vec![
                ChatMessage::system("sys"),
                ChatMessage {
                    role: Role::User,
                    parts: vec![
                        ContentPart::Text("look".into()),
                        ContentPart::Image(ImageData { mime: "image/png".into(), bytes: b"abc".to_vec() }),
                    ],
                },
            ],
            temperature: 0.7,
            max_output_tokens: 100,
            tag: "proposer:s".into(),
        };
        let body = wire_body(&req);
        assert_eq!(body["model"], "gpt-x");
        assert_eq!(body["max_tokens"], 100);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"][1]["type"], "image_url");
        assert_eq!(body["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,YWJj");
    }

    #[test]
    fn response_parsing() {
        let body = json!({"choices":[{"message":{"content":"hi"},"finish_reason":"length"}],
                          "usage":{"prompt_tokens":12,"completion_tokens":3}});
        let (text, usage, truncated) = parse_wire_response(&body).unwrap();
        assert_eq!(text, "hi");
        assert_eq!(usage, Usage { prompt_tokens: 12, completion_tokens: 3 });
        assert!(truncated);
        assert!(parse_wire_response(&json!({"choices":[]})).is_err());
    }

    #[test]
    fn missing_token_env() {
        let cfg = HttpConfig {
            url: "http://127.0.0.1:1".into(),
            auth_env: Some("ROUTEKIT_TEST_SURELY_UNSET".into()),
            retry: RetryPolicy::default(),
            request_timeout_s: 1,
        };
        assert!(matches!(HttpBackend::new("live", cfg), Err(GatewayError::MissingCredentials(_))));
    }
}
