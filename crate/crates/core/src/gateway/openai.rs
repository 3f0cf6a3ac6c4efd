use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    check_chat_request, check_embed_request, BackendConfig, ChatBackend, ChatMessage, Embedder,
    EmbeddingVector, GatewayError, Role, ToolCall, ToolSpec,
};

/// Client for any server speaking the OpenAI-compatible chat and embeddings API.
pub struct OpenAiBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .finish()
    }
}

impl OpenAiBackend {
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .connect_timeout(config.timeout())
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POSTs `body`, retrying once when the transport fails.
    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        match self.post_once(path, body) {
            Err(GatewayError::Transport(first)) => {
                warn!(path, error = %first, "transport failure, retrying once");
                self.post_once(path, body)
            }
            other => other,
        }
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::BackendRefusal {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Protocol(format!("response is not JSON: {e}")))
    }

    /// Cheap reachability probe used by health checks.
    pub fn ping(&self) -> Result<(), GatewayError> {
        let resp = self
            .client
            .get(self.url("models"))
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if resp.status().is_server_error() {
            return Err(GatewayError::BackendRefusal {
                status: resp.status().as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: Role,
    content: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    tool_calls: Option<Vec<Value>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    tool_calls: Vec<WireToolCall>,
}

#[derive(Deserialize)]
struct WireToolCall {
    function: WireFunction,
}

#[derive(Deserialize)]
struct WireFunction {
    name: String,
    #[serde(default)]
    arguments: Value,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

pub(crate) fn chat_request_body(
    config: &BackendConfig,
    messages: &[ChatMessage],
    tools: &[ToolSpec],
) -> Value {
    let wire: Vec<WireMessage<'_>> = messages
        .iter()
        .map(|m| WireMessage {
            role: m.role,
            content: &m.content,
            tool_calls: (!m.tool_calls.is_empty()).then(|| {
                m.tool_calls
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        json!({
                            "id": format!("call_{i}"),
                            "type": "function",
                            "function": {"name": c.name, "arguments": c.arguments.to_string()},
                        })
                    })
                    .collect()
            }),
        })
        .collect();
    let mut body = json!({
        "model": config.model,
        "messages": wire,
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    });
    if !tools.is_empty() {
        body["tools"] = tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    }
                })
            })
            .collect();
    }
    body
}

pub(crate) fn parse_chat_response(body: Value) -> Result<ChatMessage, GatewayError> {
    let resp: ChatResponse = serde_json::from_value(body)
        .map_err(|e| GatewayError::Protocol(format!("malformed chat response: {e}")))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Protocol("chat response has no choices".into()))?;
    let tool_calls = choice
        .message
        .tool_calls
        .into_iter()
        .map(|c| ToolCall {
            name: c.function.name,
            // Arguments arrive JSON-encoded inside a string.
            arguments: match c.function.arguments {
                Value::String(s) => serde_json::from_str(&s).unwrap_or(Value::String(s)),
                other => other,
            },
        })
        .collect();
    Ok(ChatMessage {
        role: Role::Assistant,
        content: choice.message.content.unwrap_or_default(),
        tool_calls,
    })
}

impl ChatBackend for OpenAiBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn chat(&self, messages: &[ChatMessage], tools: &[ToolSpec]) -> Result<ChatMessage, GatewayError> {
        check_chat_request(messages, tools)?;
        let body = chat_request_body(&self.config, messages, tools);
        debug!(model = %self.config.model, messages = messages.len(), "chat request");
        parse_chat_response(self.post("chat/completions", &body)?)
    }
}

impl Embedder for OpenAiBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        check_embed_request(texts)?;
        let body = json!({"model": self.config.model, "input": texts});
        let resp: EmbeddingResponse = serde_json::from_value(self.post("embeddings", &body)?)
            .map_err(|e| GatewayError::Protocol(format!("malformed embeddings response: {e}")))?;
        if resp.data.len() != texts.len() {
            return Err(GatewayError::Protocol(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        let mut data = resp.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        let dim = data[0].embedding.len();
        let mut out = Vec::with_capacity(data.len());
        for d in data {
            if d.embedding.len() != dim || dim == 0 {
                return Err(GatewayError::Protocol("embeddings have inconsistent dimension".into()));
            }
            let v = EmbeddingVector {
                values: d.embedding,
                model_id: self.config.model.clone(),
            };
            if !(v.norm() > 0.0) {
                return Err(GatewayError::Protocol("zero-norm embedding".into()));
            }
            out.push(v);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_body_shape() {
        let cfg = BackendConfig::new("http://x", "qwen2.5:32b");
        let tools = vec![ToolSpec {
            name: "transfer_to_task_planner".into(),
            description: "d".into(),
            parameters: json!({"type": "object", "properties": {}}),
        }];
        let body = chat_request_body(&cfg, &[ChatMessage::system("s"), ChatMessage::user("u")], &tools);
        assert_eq!(body["model"], "qwen2.5:32b");
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["tools"][0]["function"]["name"], "transfer_to_task_planner");
        assert!(body["messages"][0].get("tool_calls").is_none());
    }

    #[test]
    fn no_tools_field_when_empty() {
        let cfg = BackendConfig::new("http://x", "m");
        let body = chat_request_body(&cfg, &[ChatMessage::system("s")], &[]);
        assert!(body.get("tools").is_none());
    }

    #[test]
    fn parses_tool_calls_with_string_arguments() {
        let msg = parse_chat_response(json!({
            "choices": [{"message": {"role": "assistant", "content": null, "tool_calls": [
                {"id": "1", "type": "function", "function": {"name": "ask_clarification", "arguments": "{\"question\":\"Which room?\"}"}}
            ]}}]
        }))
        .unwrap();
        assert_eq!(msg.content, "");
        assert_eq!(msg.tool_calls[0].name, "ask_clarification");
        assert_eq!(msg.tool_calls[0].arguments["question"], "Which room?");
    }

    #[test]
    fn malformed_response_is_protocol_error() {
        assert!(matches!(
            parse_chat_response(json!({"choices": []})),
            Err(GatewayError::Protocol(_))
        ));
        assert!(matches!(
            parse_chat_response(json!({"foo": 1})),
            Err(GatewayError::Protocol(_))
        ));
    }
}
