//! Chat-completion services: the wire types, an HTTP client for
//! OpenAI-compatible endpoints, and a deterministic offline mock.

mod http;
mod mock;
mod retry;

pub use http::{EndpointConfig, HttpChatClient};
pub use mock::MockChatService;
pub use retry::RetryPolicy;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Single user turn, optionally preceded by a system message.
    pub fn single(
        model: impl Into<String>,
        system: Option<&str>,
        user: impl Into<String>,
        temperature: f64,
        max_tokens: u32,
    ) -> Self {
        let mut messages = Vec::with_capacity(2);
        if let Some(s) = system {
            messages.push(ChatMessage::system(s));
        }
        messages.push(ChatMessage::user(user));
        Self {
            model: model.into(),
            messages,
            temperature,
            max_tokens,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(LlmError::InvalidRequest("at least one user message is required".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Content of the last user message.
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// From usage metadata when reported, else a whitespace-token estimate.
    pub tokens_generated: u64,
    pub usage_reported: bool,
    pub latency_ms: u64,
    /// Attempts spent, including the successful one.
    pub attempts: u32,
}

/// Whitespace-token estimate used when a service omits usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("service returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("giving up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("service error: {message}")]
    Service { message: String, retryable: bool },
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            LlmError::Transport(_) => true,
            LlmError::Service { retryable, .. } => *retryable,
            _ => false,
        }
    }
}

/// Anything that can answer a chat request.
pub trait ChatService: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<T: ChatService + ?Sized> ChatService for &T {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

impl<T: ChatService + ?Sized> ChatService for Arc<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

impl<T: ChatService + ?Sized> ChatService for Box<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

/// Adapter turning a closure into a [`ChatService`].
pub struct FnService<F>(pub F);

impl<F> ChatService for FnService<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, LlmError> + Send + Sync,
{
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (self.0)(req)
    }
}

impl ChatResponse {
    /// Response with an estimated token count, for mocks and adapters.
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            tokens_generated: estimate_tokens(&text),
            text,
            usage_reported: false,
            latency_ms: 0,
            attempts: 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_request() {
        let ok = ChatRequest::single("m", Some("sys"), "hi", 0.0, 8);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.last_user(), "hi");
        let mut bad = ok.clone();
        bad.messages.retain(|m| m.role != Role::User);
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.temperature = -0.1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn retryable_classes() {
        assert!(LlmError::Status { status: 429, body: String::new() }.is_retryable());
        assert!(LlmError::Status { status: 503, body: String::new() }.is_retryable());
        assert!(!LlmError::Status { status: 400, body: String::new() }.is_retryable());
        assert!(LlmError::Transport("reset".into()).is_retryable());
        assert!(!LlmError::Decode("x".into()).is_retryable());
    }

    #[test]
    fn request_serializes_to_wire_shape() {
        let req = ChatRequest::single("gpt", None, "q", 0.5, 16);
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["messages"][0]["role"], "user");
        assert!(v.get("seed").is_none());
    }
}
