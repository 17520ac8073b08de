use std::collections::BTreeMap;
use std::time::Duration;

use base64::Engine as _;
use reqwest::blocking::Client;
use reqwest::header::CONTENT_TYPE;
use serde_json::{json, Value};

use super::{Backend, BackendSpec, CallError, Completion, GatewayError, GenerationRequest};

/// OpenAI-style `chat/completions` client. One user message carries the
/// prompt text followed by each image as a base64 PNG data URI.
pub struct HttpChatBackend {
    client: Client,
    endpoint: String,
    model: String,
    token: Option<String>,
}

impl std::fmt::Debug for HttpChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChatBackend").field("endpoint", &self.endpoint).field("model", &self.model).finish_non_exhaustive()
    }
}

impl HttpChatBackend {
    pub fn from_spec(spec: &BackendSpec) -> Result<Self, GatewayError> {
        let config = |message: String| GatewayError::Config { backend: spec.name.clone(), message };
        let (Some(endpoint), Some(model)) = (&spec.endpoint, &spec.model) else {
            return Err(config("http_chat backends need endpoint and model".into()));
        };
        let token = match &spec.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| config(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let client = Client::builder().timeout(Duration::from_secs(spec.timeout_secs.max(1))).build().map_err(|e| config(e.to_string()))?;
        Ok(Self { client, endpoint: endpoint.clone(), model: model.clone(), token })
    }

    pub fn request_body(&self, req: &GenerationRequest) -> Value {
        let mut content = vec![json!({ "type": "text", "text": req.prompt.text })];
        for img in &req.images {
            let data = base64::engine::general_purpose::STANDARD.encode(&img.bytes);
            content.push(json!({
                "type": "image_url",
                "image_url": { "url": format!("data:image/png;base64,{data}") },
            }));
        }
        json!({
            "model": self.model,
            "temperature": req.decoding.temperature,
            "max_tokens": req.decoding.max_tokens,
            "messages": [{ "role": "user", "content": content }],
        })
    }
}

/// Pulls the assistant text out of a chat-completions response body.
pub fn parse_completion(body: &Value) -> Result<Completion, String> {
    let choice = body.get("choices").and_then(|c| c.get(0)).ok_or("response has no choices")?;
    let content = choice.pointer("/message/content").ok_or("choice has no message content")?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join(""),
        Value::Null => String::new(),
        other => return Err(format!("unexpected content {other}")),
    };
    let mut metadata = BTreeMap::new();
    for key in ["id", "model", "usage"] {
        if let Some(v) = body.get(key) {
            metadata.insert(key.to_string(), v.clone());
        }
    }
    if let Some(v) = choice.get("finish_reason") {
        metadata.insert("finish_reason".into(), v.clone());
    }
    Ok(Completion { text, metadata })
}

impl Backend for HttpChatBackend {
    fn complete(&self, req: &GenerationRequest, _spec: &BackendSpec) -> Result<Completion, CallError> {
        let body = serde_json::to_vec(&self.request_body(req)).expect("json body");
        let mut call = self.client.post(&self.endpoint).header(CONTENT_TYPE, "application/json").body(body);
        if let Some(t) = &self.token {
            call = call.bearer_auth(t);
        }
        let resp = call.send().map_err(|e| CallError::Retryable(format!("transport: {e}")))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| CallError::Retryable(format!("reading body: {e}")))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(CallError::Retryable(format!("HTTP {}", status.as_u16())));
        }
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            return Err(CallError::Fatal { status: status.as_u16(), message: snippet });
        }
        let json: Value =
            serde_json::from_str(&text).map_err(|e| CallError::Fatal { status: status.as_u16(), message: format!("invalid JSON: {e}") })?;
        let mut out = parse_completion(&json).map_err(|message| CallError::Fatal { status: status.as_u16(), message })?;
        out.metadata.insert("http_status".into(), Value::from(status.as_u16()));
        Ok(out)
    }
}
