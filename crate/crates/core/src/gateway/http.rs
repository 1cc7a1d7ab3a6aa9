//! Chat-completions over HTTP with inline base64 images.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, BackendReply, ChatBackend, ChatRequest, GatewayError, Usage};
use crate::prompting::{ContentPart, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL (`…/v1`) or the full `…/chat/completions` URL.
    pub url: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::InvalidRequest(format!("http client: {e}")))?;
        let url = if config.url.trim_end_matches('/').ends_with("/chat/completions") {
            config.url.clone()
        } else {
            format!("{}/chat/completions", config.url.trim_end_matches('/'))
        };
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty());
        Ok(Self {
            client,
            url,
            api_key,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    }
}

/// Request body in the chat-completions schema.
pub(crate) fn wire_body(request: &ChatRequest, n: usize) -> Result<Value, GatewayError> {
    let mut messages = Vec::with_capacity(request.messages.len());
    for m in &request.messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        let mut parts = Vec::with_capacity(m.content.len());
        for part in &m.content {
            parts.push(match part {
                ContentPart::Text { text } => json!({"type": "text", "text": text}),
                ContentPart::Image { image } => {
                    let bytes = std::fs::read(image).map_err(|_| GatewayError::ImageUnreadable(image.clone()))?;
                    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                    json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{};base64,{data}", mime_for(image))}
                    })
                }
            });
        }
        messages.push(json!({"role": role, "content": parts}));
    }
    let mut body = json!({
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "n": n,
        "max_tokens": request.max_tokens,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    Ok(body)
}

fn choice_text(choice: &Value) -> Option<String> {
    match &choice["message"]["content"] {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

pub(crate) fn parse_reply(body: &str) -> Result<BackendReply, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::InvalidResponse(format!("not JSON: {e}")))?;
    let choices = v["choices"]
        .as_array()
        .ok_or_else(|| GatewayError::InvalidResponse("missing choices".into()))?;
    let texts = choices
        .iter()
        .map(choice_text)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| GatewayError::InvalidResponse("choice without message content".into()))?;
    let usage = Usage {
        prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(BackendReply { texts, usage })
}

impl ChatBackend for HttpBackend {
    /// Servers that ignore `n` return fewer choices; the remainder is
    /// requested again until the candidate count is met.
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let mut reply = BackendReply::default();
        while reply.texts.len() < request.num_candidates {
            let body = wire_body(request, request.num_candidates - reply.texts.len()).map_err(BackendError::Fatal)?;
            let mut req = self
                .client
                .post(&self.url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.to_string());
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| BackendError::Transient {
                status: e.status().map(|s| s.as_u16()),
                message: e.to_string(),
            })?;
            let status = resp.status();
            let text = resp.text().map_err(|e| BackendError::Transient {
                status: Some(status.as_u16()),
                message: e.to_string(),
            })?;
            if status.as_u16() == 429 || status.is_server_error() {
                return Err(BackendError::Transient {
                    status: Some(status.as_u16()),
                    message: text,
                });
            }
            if !status.is_success() {
                return Err(BackendError::Fatal(GatewayError::Rejected {
                    status: status.as_u16(),
                    body: text,
                }));
            }
            let part = parse_reply(&text).map_err(BackendError::Fatal)?;
            if part.texts.is_empty() {
                return Err(BackendError::Fatal(GatewayError::InvalidResponse("no choices".into())));
            }
            reply.usage.add(part.usage);
            reply.texts.extend(part.texts);
        }
        reply.texts.truncate(request.num_candidates);
        Ok(reply)
    }
}
