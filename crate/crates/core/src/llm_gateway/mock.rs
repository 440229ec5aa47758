//! Deterministic rule-table backend for offline runs.
//!
//! Rules are tried in order; the first whose predicates all hold supplies
//! the response. Predicates are case-insensitive substring tests over the
//! prompt, or over the first capture group of `scope` when one is given
//! (useful to look only at the target instance of a few-shot prompt).

use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, CompletionRequest, GatewayError, SchemaId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<SchemaId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub all_of: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub any_of: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub none_of: Vec<String>,
    /// A string is returned verbatim; any other JSON value is returned in
    /// its compact serialization.
    pub response: Value,
}

impl MockRule {
    pub fn new(schema: SchemaId, response: impl Into<Value>) -> Self {
        Self {
            schema: Some(schema),
            model: None,
            temperature: None,
            scope: None,
            all_of: Vec::new(),
            any_of: Vec::new(),
            none_of: Vec::new(),
            response: response.into(),
        }
    }

    pub fn all_of<I: IntoIterator<Item = S>, S: Into<String>>(mut self, keys: I) -> Self {
        self.all_of = keys.into_iter().map(Into::into).collect();
        self
    }

    pub fn scoped(mut self, scope: impl Into<String>) -> Self {
        self.scope = Some(scope.into());
        self
    }

    pub fn for_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn at_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }

    fn response_text(&self) -> String {
        match &self.response {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTable {
    pub rules: Vec<MockRule>,
}

impl RuleTable {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let table: RuleTable = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for r in &table.rules {
            if let Some(s) = &r.scope {
                Regex::new(s).map_err(|e| format!("bad scope regex '{s}': {e}"))?;
            }
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }
}

struct CompiledRule {
    rule: MockRule,
    scope: Option<Regex>,
    all_of: Vec<String>,
    any_of: Vec<String>,
    none_of: Vec<String>,
}

impl CompiledRule {
    fn matches(&self, req: &CompletionRequest) -> bool {
        if self.rule.schema.is_some_and(|s| s != req.schema_id) {
            return false;
        }
        if self.rule.model.as_ref().is_some_and(|m| *m != req.backend.model_id) {
            return false;
        }
        if self
            .rule
            .temperature
            .is_some_and(|t| (t - req.backend.temperature).abs() > 1e-9)
        {
            return false;
        }
        let haystack = match &self.scope {
            Some(re) => match re.captures(&req.prompt) {
                Some(c) => c.get(1).or_else(|| c.get(0)).map(|m| m.as_str()).unwrap_or(""),
                None => return false,
            },
            None => req.prompt.as_str(),
        }
        .to_lowercase();
        self.all_of.iter().all(|k| haystack.contains(k.as_str()))
            && (self.any_of.is_empty() || self.any_of.iter().any(|k| haystack.contains(k.as_str())))
            && !self.none_of.iter().any(|k| haystack.contains(k.as_str()))
    }
}

pub struct MockBackend {
    rules: Vec<CompiledRule>,
}

impl MockBackend {
    pub fn new(table: RuleTable) -> Result<Self, String> {
        let lower = |v: &[String]| v.iter().map(|s| s.to_lowercase()).collect::<Vec<_>>();
        let rules = table
            .rules
            .into_iter()
            .map(|rule| {
                let scope = match &rule.scope {
                    Some(s) => Some(Regex::new(s).map_err(|e| e.to_string())?),
                    None => None,
                };
                Ok(CompiledRule {
                    scope,
                    all_of: lower(&rule.all_of),
                    any_of: lower(&rule.any_of),
                    none_of: lower(&rule.none_of),
                    rule,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Self { rules })
    }
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend").field("rules", &self.rules.len()).finish()
    }
}

impl Backend for MockBackend {
    fn generate(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        self.rules
            .iter()
            .find(|r| r.matches(req))
            .map(|r| r.rule.response_text())
            .ok_or(GatewayError::MockNoRule { schema: req.schema_id })
    }
}
