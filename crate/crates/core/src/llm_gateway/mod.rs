//! Cache-backed access to text-generation backends.
//!
//! A [`Gateway`] dispatches a [`CompletionRequest`] to either an
//! OpenAI-compatible HTTP endpoint or a deterministic rule-table mock,
//! memoizing raw generations in a content-addressed on-disk cache.
//! [`Gateway::complete_structured`] extracts the first JSON value in a
//! response, validates it against a registered schema and re-prompts with a
//! repair instruction on failure.

mod cache;
mod http;
mod mock;

pub use cache::DiskCache;
pub use http::HttpBackend;
pub use mock::{MockBackend, MockRule, RuleTable};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Retries used by [`Gateway::complete_structured`] when callers have no
/// preference.
pub const DEFAULT_RETRIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaId {
    Detection,
    ThemeList,
    ThemeAssignment,
    LinkOpinion,
    DirectNetwork,
}

impl SchemaId {
    pub const ALL: [SchemaId; 5] = [
        SchemaId::Detection,
        SchemaId::ThemeList,
        SchemaId::ThemeAssignment,
        SchemaId::LinkOpinion,
        SchemaId::DirectNetwork,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemaId::Detection => "detection",
            SchemaId::ThemeList => "theme_list",
            SchemaId::ThemeAssignment => "theme_assignment",
            SchemaId::LinkOpinion => "link_opinion",
            SchemaId::DirectNetwork => "direct_network",
        }
    }
}

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemaId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemaId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| format!("unknown schema id '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    pub kind: BackendKind,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Environment variable holding a bearer token for HTTP backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
}

impl BackendSpec {
    pub fn mock(name: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: BackendKind::Mock,
            model_id: model_id.into(),
            endpoint_url: None,
            temperature: 0.0,
            seed: None,
            api_key_env: None,
            timeout_s: None,
        }
    }

    pub fn http(name: impl Into<String>, model_id: impl Into<String>, endpoint_url: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint_url: Some(endpoint_url.into()),
            ..Self::mock(name, model_id)
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |reason: &str| GatewayError::InvalidBackend {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(bad("temperature must lie in [0, 2]"));
        }
        if self.model_id.trim().is_empty() {
            return Err(bad("model_id is empty"));
        }
        if self.kind == BackendKind::Http && self.endpoint_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
            return Err(bad("http backends require endpoint_url"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub backend: BackendSpec,
    pub prompt: String,
    pub max_tokens: u32,
    pub schema_id: SchemaId,
}

impl CompletionRequest {
    pub fn new(backend: BackendSpec, prompt: impl Into<String>, schema_id: SchemaId) -> Self {
        Self {
            backend,
            prompt: prompt.into(),
            max_tokens: 2048,
            schema_id,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredResponse {
    pub raw_text: String,
    pub parsed: Value,
    pub attempts: usize,
}

/// Why a parsed value failed its schema.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("no JSON value found in response")]
    NoJson,
    #[error("unknown label '{0}'")]
    UnknownLabel(String),
    #[error("{0}")]
    Invalid(String),
}

impl SchemaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SchemaError::Invalid(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid backend '{name}': {reason}")]
    InvalidBackend { name: String, reason: String },
    #[error("transport failure for backend '{backend}' at {endpoint}: {message}")]
    Transport {
        backend: String,
        endpoint: String,
        message: String,
    },
    #[error("backend '{backend}' returned status {status}: {body}")]
    Status { backend: String, status: u16, body: String },
    #[error("backend '{backend}' timed out at {endpoint}")]
    Timeout { backend: String, endpoint: String },
    #[error("malformed response from backend '{backend}': {message}")]
    MalformedResponse { backend: String, message: String },
    #[error("mock backend has no rule for schema '{schema}'")]
    MockNoRule { schema: SchemaId },
    #[error("schema '{0}' is not registered")]
    UnregisteredSchema(SchemaId),
    #[error("structured output still invalid after {} attempts: {last_error}", attempts.len())]
    RetriesExhausted {
        attempts: Vec<String>,
        last_error: SchemaError,
    },
    #[error("cache error: {0}")]
    Cache(#[from] std::io::Error),
}

/// A text-generation backend. Implementations must be deterministic for
/// identical requests if cached replays are to be faithful.
pub trait Backend: Send + Sync {
    fn generate(&self, req: &CompletionRequest) -> Result<String, GatewayError>;
}

impl<F> Backend for F
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn generate(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        self(req)
    }
}

pub type Validator = fn(&Value) -> Result<(), SchemaError>;

/// Validators keyed by schema id.
#[derive(Clone, Default)]
pub struct SchemaRegistry {
    validators: HashMap<SchemaId, Validator>,
}

impl SchemaRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: SchemaId, validator: Validator) -> &mut Self {
        self.validators.insert(id, validator);
        self
    }

    pub fn get(&self, id: SchemaId) -> Option<Validator> {
        self.validators.get(&id).copied()
    }
}

impl fmt::Debug for SchemaRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut ids: Vec<_> = self.validators.keys().collect();
        ids.sort();
        f.debug_struct("SchemaRegistry").field("ids", &ids).finish()
    }
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    v: u32,
    model_id: &'a str,
    temperature: f64,
    seed: Option<u64>,
    prompt: &'a str,
    schema_id: &'a str,
}

/// SHA-256 over (model id, temperature, seed, prompt, schema id), hex encoded.
pub fn cache_key(req: &CompletionRequest) -> String {
    let material = KeyMaterial {
        v: 1,
        model_id: &req.backend.model_id,
        temperature: req.backend.temperature,
        seed: req.backend.seed,
        prompt: &req.prompt,
        schema_id: req.schema_id.as_str(),
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Instruction appended to a prompt after a response failed validation.
pub fn repair_instruction(error: &SchemaError) -> String {
    format!(
        "\n\nYour previous response could not be used: {error}. \
         Return only the corrected output as valid JSON in exactly the required format."
    )
}

/// Returns the first JSON object or array embedded in `text` that passes
/// `validate`, or the validation error of the first parseable candidate.
pub fn extract_structured(
    text: &str,
    validate: impl Fn(&Value) -> Result<(), SchemaError>,
) -> Result<Value, SchemaError> {
    let mut first_err: Option<SchemaError> = None;
    for (i, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            match validate(&value) {
                Ok(()) => return Ok(value),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
    }
    Err(first_err.unwrap_or(SchemaError::NoJson))
}

pub struct Gateway {
    http: Arc<dyn Backend>,
    mock: Arc<dyn Backend>,
    cache: Option<DiskCache>,
    registry: SchemaRegistry,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("cache", &self.cache)
            .field("registry", &self.registry)
            .field("backend_calls", &self.backend_calls())
            .finish()
    }
}

impl Gateway {
    /// A gateway with the given mock backend, the default HTTP client, no
    /// cache and every pipeline schema registered.
    pub fn new(mock: Arc<dyn Backend>) -> Self {
        Self {
            http: Arc::new(HttpBackend),
            mock,
            cache: None,
            registry: crate::schemas::default_registry(),
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn with_http(mut self, http: Arc<dyn Backend>) -> Self {
        self.http = http;
        self
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_registry(mut self, registry: SchemaRegistry) -> Self {
        self.registry = registry;
        self
    }

    /// Number of requests that reached a backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        if req.prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        req.backend.validate()?;
        let key = cache_key(req);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(hit);
            }
        }
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let text = match req.backend.kind {
            BackendKind::Http => self.http.generate(req)?,
            BackendKind::Mock => self.mock.generate(req)?,
        };
        if let Some(cache) = &self.cache {
            cache.put(&key, &text)?;
        }
        Ok(text)
    }

    pub fn complete_structured(
        &self,
        req: &CompletionRequest,
        retries: usize,
    ) -> Result<StructuredResponse, GatewayError> {
        let validate = self
            .registry
            .get(req.schema_id)
            .ok_or(GatewayError::UnregisteredSchema(req.schema_id))?;
        let mut raw_attempts = Vec::new();
        let mut attempt_req = req.clone();
        loop {
            let raw = self.complete(&attempt_req)?;
            let outcome = extract_structured(&raw, validate);
            raw_attempts.push(raw);
            match outcome {
                Ok(parsed) => {
                    return Ok(StructuredResponse {
                        raw_text: raw_attempts.pop().unwrap_or_default(),
                        parsed,
                        attempts: raw_attempts.len() + 1,
                    })
                }
                Err(e) => {
                    tracing::debug!(schema = %req.schema_id, error = %e, "structured output rejected");
                    if raw_attempts.len() > retries {
                        return Err(GatewayError::RetriesExhausted {
                            attempts: raw_attempts,
                            last_error: e,
                        });
                    }
                    attempt_req.prompt = format!("{}{}", req.prompt, repair_instruction(&e));
                }
            }
        }
    }
}
