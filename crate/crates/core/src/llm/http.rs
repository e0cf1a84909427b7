use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{estimate_tokens, ChatRequest, ChatResponse, ChatService, LlmError, RetryPolicy};

const BODY_EXCERPT_CHARS: usize = 300;

/// Endpoint settings. The API key is read from `api_key_env` at client
/// construction and never stored in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Local servers often need no credential.
    #[serde(default)]
    pub require_api_key: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_inflight() -> usize {
    8
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            timeout_s: default_timeout(),
            max_inflight: default_inflight(),
            api_key_env: default_key_env(),
            require_api_key: false,
            retry: RetryPolicy::default(),
        }
    }
}

/// Counting gate bounding concurrent requests.
struct InflightGate {
    used: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl InflightGate {
    fn acquire(&self) -> InflightPermit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        InflightPermit(self)
    }
}

struct InflightPermit<'a>(&'a InflightGate);

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

/// Blocking client for `POST {base_url}/chat/completions`.
pub struct HttpChatClient {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    gate: InflightGate,
}

impl HttpChatClient {
    pub fn new(config: &EndpointConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if config.require_api_key && api_key.is_none() {
            return Err(LlmError::MissingCredential(config.api_key_env.clone()));
        }
        if !(config.timeout_s.is_finite() && config.timeout_s > 0.0) {
            return Err(LlmError::InvalidRequest(format!("timeout_s must be positive, got {}", config.timeout_s)));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
            retry: config.retry.clone(),
            gate: InflightGate {
                used: Mutex::new(0),
                freed: Condvar::new(),
                cap: config.max_inflight.max(1),
            },
        })
    }

    fn attempt(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let _permit = self.gate.acquire();
        let started = Instant::now();
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call.send_json(req).map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status {
                status,
                body: body.chars().take(BODY_EXCERPT_CHARS).collect(),
            });
        }
        let mut parsed = parse_completion(&body)?;
        parsed.latency_ms = started.elapsed().as_millis() as u64;
        Ok(parsed)
    }
}

impl ChatService for HttpChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        let (mut resp, attempts) = self.retry.run(|_| self.attempt(req))?;
        resp.attempts = attempts;
        Ok(resp)
    }
}

/// Parse a chat-completions response body.
pub(crate) fn parse_completion(body: &str) -> Result<ChatResponse, LlmError> {
    let v: Value = serde_json::from_str(body).map_err(|e| LlmError::Decode(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::Decode("missing choices[0].message.content".into()))?
        .to_string();
    let usage = v.pointer("/usage/completion_tokens").and_then(Value::as_u64);
    Ok(ChatResponse {
        tokens_generated: usage.unwrap_or_else(|| estimate_tokens(&text)),
        usage_reported: usage.is_some(),
        text,
        latency_ms: 0,
        attempts: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_standard_body() {
        let body = r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"Hello there"}}],"usage":{"prompt_tokens":5,"completion_tokens":2}}"#;
        let r = parse_completion(body).unwrap();
        assert_eq!(r.text, "Hello there");
        assert_eq!(r.tokens_generated, 2);
        assert!(r.usage_reported);
    }

    #[test]
    fn estimates_without_usage() {
        let body = r#"{"choices":[{"message":{"content":"one two three"}}]}"#;
        let r = parse_completion(body).unwrap();
        assert_eq!(r.tokens_generated, 3);
        assert!(!r.usage_reported);
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(parse_completion("{}"), Err(LlmError::Decode(_))));
        assert!(matches!(parse_completion("not json"), Err(LlmError::Decode(_))));
    }

    #[test]
    fn missing_required_key() {
        let mut cfg = EndpointConfig::new("http://localhost:1", "m");
        cfg.api_key_env = "PROMPT_DP_TEST_DEFINITELY_UNSET".into();
        cfg.require_api_key = true;
        assert!(matches!(HttpChatClient::new(&cfg), Err(LlmError::MissingCredential(_))));
    }
}
