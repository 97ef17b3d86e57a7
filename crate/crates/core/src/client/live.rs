use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};

use super::{ClientError, Provider, ProviderConfig, ProviderReply, VisionRequest};

/// Resolves the chat-completions URL from a base URL or a full endpoint.
pub fn chat_completions_url(endpoint: &str) -> String {
    let trimmed = endpoint.trim_end_matches('/');
    if trimmed.ends_with("/chat/completions") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/chat/completions")
    }
}

/// One user message carrying the prompt text and the JPEG as a data URL.
pub fn build_request_body(req: &VisionRequest<'_>) -> Value {
    let data_url = format!("data:image/jpeg;base64,{}", BASE64.encode(req.image_jpeg));
    json!({
        "model": req.model,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": req.prompt},
                {"type": "image_url", "image_url": {"url": data_url}}
            ]
        }]
    })
}

/// Provider for OpenAI-compatible chat-completions endpoints.
pub struct OpenAiCompatibleProvider {
    url: String,
    credential: Option<String>,
    http: reqwest::blocking::Client,
}

impl OpenAiCompatibleProvider {
    /// Reads the bearer credential from `config.credential_env_name`; requests
    /// go out unauthenticated when it is unset.
    pub fn new(config: &ProviderConfig) -> Result<Self, ClientError> {
        let credential = std::env::var(&config.credential_env_name)
            .ok()
            .filter(|v| !v.trim().is_empty());
        Self::with_credential(config, credential)
    }

    pub fn with_credential(config: &ProviderConfig, credential: Option<String>) -> Result<Self, ClientError> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(Self {
            url: chat_completions_url(&config.endpoint_url),
            credential,
            http,
        })
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| body.chars().take(500).collect())
}

/// Extracts the assistant text from a chat-completions response body.
fn extract_reply(body: &str, fallback_model: &str) -> Result<ProviderReply, ClientError> {
    let value: Value = serde_json::from_str(body).map_err(|e| ClientError::Provider {
        status: None,
        message: format!("malformed response: {e}"),
    })?;
    if let Some(err) = value.get("error").filter(|e| !e.is_null()) {
        let message = err
            .get("message")
            .and_then(Value::as_str)
            .map_or_else(|| err.to_string(), str::to_string);
        return Err(ClientError::Provider { status: None, message });
    }
    let content = value
        .pointer("/choices/0/message/content")
        .ok_or_else(|| ClientError::Provider {
            status: None,
            message: "response has no choices[0].message.content".into(),
        })?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => String::new(),
    };
    let model_id = value
        .get("model")
        .and_then(Value::as_str)
        .unwrap_or(fallback_model)
        .to_string();
    Ok(ProviderReply {
        text,
        model_id,
        latency_s: None,
    })
}

impl Provider for OpenAiCompatibleProvider {
    fn complete(&self, req: &VisionRequest<'_>) -> Result<ProviderReply, ClientError> {
        let body = serde_json::to_vec(&build_request_body(req)).expect("request body serializes");
        let mut builder = self
            .http
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body);
        if let Some(key) = &self.credential {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout
            } else {
                ClientError::Network(e.to_string())
            }
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout
            } else {
                ClientError::Network(e.to_string())
            }
        })?;
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(ClientError::Auth(error_message(&text)));
        }
        if !status.is_success() {
            return Err(ClientError::Provider {
                status: Some(status.as_u16()),
                message: error_message(&text),
            });
        }
        extract_reply(&text, req.model)
    }
}
