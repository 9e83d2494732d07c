use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendResponse, Conversation, GatewayError, Role, VlmBackend};
use crate::retry::RetryPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Prefix for `/chat/completions`, e.g. `https://gateway.example/v1`.
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    pub model_id: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model_id: model_id.into(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
            max_tokens: None,
        }
    }
}

/// Chat-completion client. Requests are sent at temperature 0; 429s,
/// 5xx responses, timeouts and connection errors are retried with
/// exponential backoff.
pub struct HttpBackend {
    cfg: HttpBackendConfig,
    endpoint: String,
    client: reqwest::Client,
}

enum AttemptError {
    Timeout,
    RateLimited,
    Retryable(String),
    Fatal(GatewayError),
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        let endpoint = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        Ok(Self {
            cfg,
            endpoint,
            client,
        })
    }

    /// The JSON body sent for `conv`.
    pub fn request_body(&self, conv: &Conversation) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        let messages: Vec<Value> = conv
            .turns
            .iter()
            .map(|turn| {
                let mut content = Vec::new();
                if turn.image.is_some() {
                    if let Some(bytes) = conv.image_bytes() {
                        content.push(json!({"type": "image", "data": b64.encode(bytes)}));
                    }
                }
                content.push(json!({"type": "text", "text": turn.text}));
                let role = match turn.role {
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({"role": role, "content": content})
            })
            .collect();
        let model = if conv.model_id.is_empty() {
            &self.cfg.model_id
        } else {
            &conv.model_id
        };
        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": 0,
        });
        if let Some(max) = self.cfg.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }

    async fn attempt(&self, body: &Value) -> Result<String, AttemptError> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                AttemptError::Timeout
            } else {
                AttemptError::Retryable(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(AttemptError::RateLimited);
        }
        if status.is_server_error() {
            return Err(AttemptError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(GatewayError::BackendUnavailable(format!(
                "HTTP {status}"
            ))));
        }
        let text = resp.text().await.map_err(|e| {
            if e.is_timeout() {
                AttemptError::Timeout
            } else {
                AttemptError::Retryable(e.to_string())
            }
        })?;
        parse_reply(&text).map_err(AttemptError::Fatal)
    }
}

fn parse_reply(body: &str) -> Result<String, GatewayError> {
    let malformed = |m: &str| GatewayError::MalformedBackendReply(m.to_string());
    if body.trim().is_empty() {
        return Err(malformed("empty body"));
    }
    let value: Value = serde_json::from_str(body).map_err(|e| malformed(&e.to_string()))?;
    let content = &value["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        // some gateways return content parts
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(malformed("missing choices[0].message.content")),
    };
    if text.trim().is_empty() {
        return Err(malformed("empty content"));
    }
    Ok(text)
}

#[async_trait]
impl VlmBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.cfg.model_id
    }

    async fn complete(&self, conv: &Conversation) -> Result<BackendResponse, GatewayError> {
        let body = self.request_body(conv);
        let start = Instant::now();
        let (result, attempts) = self
            .cfg
            .retry
            .run(
                |_| self.attempt(&body),
                |e| !matches!(e, AttemptError::Fatal(_)),
            )
            .await;
        let text = result.map_err(|e| match e {
            AttemptError::Timeout => GatewayError::BackendTimeout { attempts },
            AttemptError::RateLimited => GatewayError::RateLimited { attempts },
            AttemptError::Retryable(m) => {
                GatewayError::BackendUnavailable(format!("{m} after {attempts} attempt(s)"))
            }
            AttemptError::Fatal(e) => e,
        })?;
        Ok(BackendResponse {
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_id: self.cfg.model_id.clone(),
            attempts,
        })
    }
}
