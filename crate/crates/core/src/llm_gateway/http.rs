use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::{Backend, CompletionRequest, GatewayError};

const DEFAULT_TIMEOUT_S: f64 = 120.0;

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    max_tokens: u32,
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone, Default)]
pub struct HttpBackend;

/// Resolves a configured endpoint to the chat-completions URL.
pub(crate) fn chat_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_string()
    } else {
        format!("{base}/chat/completions")
    }
}

pub(crate) fn request_body(req: &CompletionRequest) -> String {
    let body = ChatRequest {
        model: &req.backend.model_id,
        messages: vec![ChatMessage {
            role: "user",
            content: &req.prompt,
        }],
        temperature: req.backend.temperature,
        seed: req.backend.seed,
        max_tokens: req.max_tokens,
    };
    serde_json::to_string(&body).expect("chat request serializes")
}

impl Backend for HttpBackend {
    fn generate(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let spec = &req.backend;
        let endpoint = spec.endpoint_url.clone().unwrap_or_default();
        let url = chat_url(&endpoint);
        let timeout = Duration::from_secs_f64(spec.timeout_s.unwrap_or(DEFAULT_TIMEOUT_S));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();

        let mut call = agent.post(&url).header("Content-Type", "application/json");
        if let Some(var) = &spec.api_key_env {
            if let Ok(key) = std::env::var(var) {
                call = call.header("Authorization", format!("Bearer {key}"));
            }
        }
        let transport = |message: String| GatewayError::Transport {
            backend: spec.name.clone(),
            endpoint: endpoint.clone(),
            message,
        };
        let mut resp = match call.send(request_body(req)) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Err(GatewayError::Timeout {
                    backend: spec.name.clone(),
                    endpoint,
                })
            }
            Err(e) => return Err(transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Status {
                backend: spec.name.clone(),
                status,
                body: text,
            });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse {
            backend: spec.name.clone(),
            message: e.to_string(),
        })?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::MalformedResponse {
                backend: spec.name.clone(),
                message: "missing choices[0].message.content".into(),
            })
    }
}
