//! Command errors and their exit codes.

use procnet_core::baseline::BaselineError;
use procnet_core::cluster::ClusterError;
use procnet_core::detect::DetectError;
use procnet_core::evalkit::EvalError;
use procnet_core::links::LinkError;
use procnet_core::llm_gateway::GatewayError;
use procnet_core::network::NetworkError;
use procnet_core::transcript::TranscriptError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Backend,
    Parse,
}

impl ErrorKind {
    pub fn exit_code(&self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Backend => 2,
            ErrorKind::Parse => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    /// Offending config key or input path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            key: None,
        }
    }

    pub fn validation(message: impl Into<String>, key: Option<String>) -> Self {
        Self {
            key,
            ..Self::new(ErrorKind::Validation, message)
        }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Parse, message)
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Backend, message)
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn key(&self) -> Option<&str> {
        self.key.as_deref()
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// Machine-readable single-line report for stderr.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&serde_json::json!({ "error": self })).expect("error serializes")
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        let kind = match &e {
            GatewayError::EmptyPrompt | GatewayError::InvalidBackend { .. } => ErrorKind::Validation,
            GatewayError::RetriesExhausted { .. } => ErrorKind::Parse,
            _ => ErrorKind::Backend,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<TranscriptError> for CliError {
    fn from(e: TranscriptError) -> Self {
        let kind = match &e {
            TranscriptError::Io { .. } | TranscriptError::Pattern { .. } => ErrorKind::Validation,
            _ => ErrorKind::Parse,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Gateway(g) => g.into(),
            DetectError::Transcript(t) => t.into(),
            DetectError::UnknownLabel(_) => Self::parse(e.to_string()),
            _ => Self::validation(e.to_string(), None),
        }
    }
}

impl From<ClusterError> for CliError {
    fn from(e: ClusterError) -> Self {
        match e {
            ClusterError::Gateway(g) => g.into(),
            ClusterError::TooFewProcesses { .. } | ClusterError::NoThemes => Self::validation(e.to_string(), None),
            _ => Self::parse(e.to_string()),
        }
    }
}

impl From<LinkError> for CliError {
    fn from(e: LinkError) -> Self {
        Self::validation(e.to_string(), None)
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        Self::parse(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Gateway(g) => g.into(),
            BaselineError::Network(n) => n.into(),
            BaselineError::TooFewProcesses(_) => Self::validation(e.to_string(), None),
            BaselineError::NoThemes => Self::parse(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Parse { .. } => Self::parse(e.to_string()),
            _ => Self::validation(e.to_string(), None),
        }
    }
}
