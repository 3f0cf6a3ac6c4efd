//! Uniform access to chat-completion and embedding models.
//!
//! Agents talk to a [`ChatBackend`] and memory talks to an [`Embedder`]. Two
//! families of implementation ship here: [`OpenAiBackend`] speaks the
//! OpenAI-compatible wire format to any local or remote model server, and
//! [`ScriptedBackend`] / [`HashEmbedder`] are deterministic stand-ins used by
//! tests, fixtures and scripted evaluation runs.

mod hash_embed;
mod openai;
mod scripted;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use hash_embed::{HashEmbedder, HASH_EMBED_DIM, HASH_EMBED_MODEL};
pub use openai::OpenAiBackend;
pub use scripted::{ScriptEntry, ScriptMatch, ScriptReply, ScriptedBackend};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend refused request with status {status}: {body}")]
    BackendRefusal { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_timeout_secs() -> f64 {
    120.0
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
            api_key: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !self.timeout_secs.is_finite() || self.timeout_secs <= 0.0 {
            return Err(GatewayError::InvalidRequest("timeout must be positive".into()));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send + Sync {
    /// Identifier recorded in transcripts and reports.
    fn model_id(&self) -> &str;

    /// Sampling temperature in effect, for report provenance.
    fn temperature(&self) -> f64 {
        0.0
    }

    fn chat(&self, messages: &[ChatMessage], tools: &[ToolSpec]) -> Result<ChatMessage, GatewayError>;
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
}

/// Shared precondition check for every chat implementation.
pub fn check_chat_request(messages: &[ChatMessage], tools: &[ToolSpec]) -> Result<(), GatewayError> {
    match messages.first() {
        None => return Err(GatewayError::InvalidRequest("no messages".into())),
        Some(m) if m.role != Role::System => {
            return Err(GatewayError::InvalidRequest(
                "first message must have role system".into(),
            ))
        }
        _ => {}
    }
    if let Some(m) = messages
        .iter()
        .find(|m| !m.tool_calls.is_empty() && m.role != Role::Assistant)
    {
        return Err(GatewayError::InvalidRequest(format!(
            "tool calls on a {:?} message",
            m.role
        )));
    }
    let mut names = std::collections::BTreeSet::new();
    for t in tools {
        if !names.insert(t.name.as_str()) {
            return Err(GatewayError::InvalidRequest(format!("duplicate tool `{}`", t.name)));
        }
    }
    Ok(())
}

pub fn check_embed_request(texts: &[String]) -> Result<(), GatewayError> {
    if texts.is_empty() {
        return Err(GatewayError::InvalidRequest("no texts to embed".into()));
    }
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(GatewayError::InvalidRequest("cannot embed empty text".into()));
    }
    Ok(())
}

/// Hex SHA-256 over the role/content sequence of a transcript.
///
/// Tool calls are included so that assistant turns carrying handoffs hash
/// differently from plain replies.
pub fn transcript_digest(messages: &[ChatMessage]) -> String {
    let canonical = serde_json::to_vec(messages).expect("messages serialize");
    sha256_hex(&canonical)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_message_must_be_system() {
        assert!(check_chat_request(&[], &[]).is_err());
        assert!(check_chat_request(&[ChatMessage::user("hi")], &[]).is_err());
        assert!(check_chat_request(&[ChatMessage::system("s"), ChatMessage::user("hi")], &[]).is_ok());
    }

    #[test]
    fn tool_calls_only_on_assistant() {
        let mut m = ChatMessage::user("x");
        m.tool_calls.push(ToolCall {
            name: "t".into(),
            arguments: serde_json::Value::Null,
        });
        assert!(check_chat_request(&[ChatMessage::system("s"), m], &[]).is_err());
    }

    #[test]
    fn duplicate_tools_rejected() {
        let t = ToolSpec {
            name: "a".into(),
            description: String::new(),
            parameters: serde_json::json!({}),
        };
        assert!(check_chat_request(&[ChatMessage::system("s")], &[t.clone(), t]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::new("http://localhost:1", "m");
        assert!(c.validate().is_ok());
        c.temperature = f64::NAN;
        assert!(c.validate().is_err());
        c.temperature = 0.2;
        c.max_tokens = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = vec![ChatMessage::system("s"), ChatMessage::user("u")];
        let b = vec![ChatMessage::system("s"), ChatMessage::user("u ")];
        assert_eq!(transcript_digest(&a), transcript_digest(&a.clone()));
        assert_ne!(transcript_digest(&a), transcript_digest(&b));
        assert_eq!(transcript_digest(&a).len(), 64);
    }
}
