//! Pipeline configuration read from TOML.
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use procnet_core::detect::{DetectionConfig, ALLOWED_K};
use procnet_core::links::{EnsembleKind, EnsembleStrategy, Strength};
use procnet_core::llm_gateway::{BackendKind, BackendSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    /// Rule table (JSON) for mock backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSection {
    pub backend: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "one")]
    pub runs: usize,
    /// Labeled example pool (JSON lines). Required when `k > 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "four")]
    pub parallelism: usize,
    #[serde(default = "two")]
    pub context_before: usize,
    #[serde(default = "two")]
    pub context_after: usize,
    #[serde(default = "default_true")]
    pub patient_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStrategy {
    Single,
    TwoStep,
}

impl ClusterStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClusterStrategy::Single => "single",
            ClusterStrategy::TwoStep => "two_step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringSection {
    pub backend: String,
    #[serde(default = "default_cluster_strategy")]
    pub strategy: ClusterStrategy,
    #[serde(default = "default_true")]
    pub repair: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinksSection {
    #[serde(default = "default_link_strategy")]
    pub strategy: String,
    /// Backend for the prompt- and temperature-based ensembles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    /// The three backends of a model-based ensemble.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub backends: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "four")]
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationSection {
    #[serde(default = "fifteen")]
    pub lead_min: f64,
    #[serde(default = "five")]
    pub tail_min: f64,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        Self {
            lead_min: 15.0,
            tail_min: 5.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// DOT rendering hides weaker edges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_strength: Option<Strength>,
    /// DOT rendering keeps only the heaviest nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_nodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "four")]
    pub max_concurrent_sessions: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            max_concurrent_sessions: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            cache: None,
            output: default_output(),
        }
    }
}

fn default_k() -> usize {
    5
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn four() -> usize {
    4
}
fn fifteen() -> f64 {
    15.0
}
fn five() -> f64 {
    5.0
}
fn default_true() -> bool {
    true
}
fn default_cluster_strategy() -> ClusterStrategy {
    ClusterStrategy::TwoStep
}
fn default_link_strategy() -> String {
    "prompt".into()
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default)]
    pub mock: MockConfig,
    pub detection: DetectionSection,
    pub clustering: ClusteringSection,
    pub links: LinksSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSection>,
    #[serde(default)]
    pub segmentation: SegmentationSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub paths: PathsSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_repair: bool,
    pub strategy: Option<String>,
    pub k: Option<usize>,
    pub cache: Option<PathBuf>,
    pub mock: bool,
    pub output: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("config: {}", e.message().trim()), None))
    }

    /// Loads, resolves relative paths and validates.
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display()), None))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.mock.rules.as_mut() {
            fix(p);
        }
        if let Some(p) = self.detection.pool.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.cache.as_mut() {
            fix(p);
        }
        fix(&mut self.paths.output);
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.detection.seed = s;
            self.links.seed = s;
        }
        if ov.no_repair {
            self.clustering.repair = false;
        }
        if let Some(s) = &ov.strategy {
            self.links.strategy = s.clone();
        }
        if let Some(k) = ov.k {
            self.detection.k = k;
        }
        if let Some(c) = &ov.cache {
            self.paths.cache = Some(c.clone());
        }
        if let Some(o) = &ov.output {
            self.paths.output = o.clone();
        }
        if ov.mock {
            for b in self.backends.values_mut() {
                b.kind = BackendKind::Mock;
            }
        }
    }

    fn check_backend(&self, key: &str, name: &str) -> Result<(), CliError> {
        if !self.backends.contains_key(name) {
            return Err(CliError::validation(
                format!("{key}: backend '{name}' is not defined under [backends]"),
                Some(key.to_string()),
            ));
        }
        Ok(())
    }

    /// Errors name the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        for (name, b) in &self.backends {
            self.spec(name)
                .validate()
                .map_err(|e| CliError::validation(format!("backends.{name}: {e}"), Some(format!("backends.{name}"))))?;
            if b.kind == BackendKind::Mock && self.mock.rules.is_none() {
                return Err(CliError::validation(
                    format!("backends.{name}: mock backends need mock.rules"),
                    Some("mock.rules".into()),
                ));
            }
        }
        self.check_backend("detection.backend", &self.detection.backend)?;
        self.check_backend("clustering.backend", &self.clustering.backend)?;
        if let Some(b) = &self.baseline {
            self.check_backend("baseline.backend", &b.backend)?;
        }
        if !ALLOWED_K.contains(&self.detection.k) {
            return Err(CliError::validation(
                format!("detection.k: must be one of {ALLOWED_K:?}, got {}", self.detection.k),
                Some("detection.k".into()),
            ));
        }
        if self.detection.k > 0 && self.detection.pool.is_none() {
            return Err(CliError::validation(
                "detection.pool: required when k > 0",
                Some("detection.pool".into()),
            ));
        }
        if self.detection.runs == 0 {
            return Err(CliError::validation(
                "detection.runs: must be positive",
                Some("detection.runs".into()),
            ));
        }
        let kind = self.link_kind()?;
        match kind {
            EnsembleKind::ModelBased => {
                if self.links.backends.len() != 3 {
                    return Err(CliError::validation(
                        "links.backends: a model-based ensemble needs exactly 3 backends",
                        Some("links.backends".into()),
                    ));
                }
                for b in &self.links.backends {
                    self.check_backend("links.backends", b)?;
                }
            }
            _ => match &self.links.backend {
                Some(b) => self.check_backend("links.backend", b)?,
                None => {
                    return Err(CliError::validation(
                        "links.backend: required for prompt- and temperature-based ensembles",
                        Some("links.backend".into()),
                    ))
                }
            },
        }
        self.ensemble()?;
        let s = &self.segmentation;
        if !(s.lead_min.is_finite() && s.lead_min > 0.0 && s.tail_min.is_finite() && s.tail_min >= 0.0) {
            return Err(CliError::validation(
                "segmentation: lead_min must be positive and tail_min non-negative",
                Some("segmentation".into()),
            ));
        }
        Ok(())
    }

    pub fn link_kind(&self) -> Result<EnsembleKind, CliError> {
        self.links
            .strategy
            .parse()
            .map_err(|e: String| CliError::validation(format!("links.strategy: {e}"), Some("links.strategy".into())))
    }

    /// The named backend as a gateway spec. Panics on unknown names; call
    /// after [`validate`](Self::validate).
    pub fn spec(&self, name: &str) -> BackendSpec {
        let b = &self.backends[name];
        BackendSpec {
            name: name.to_string(),
            kind: b.kind,
            model_id: b.model_id.clone(),
            endpoint_url: b.endpoint_url.clone(),
            temperature: 0.0,
            seed: b.seed,
            api_key_env: b.api_key_env.clone(),
            timeout_s: b.timeout_s,
        }
    }

    pub fn ensemble(&self) -> Result<EnsembleStrategy, CliError> {
        let invalid =
            |e: procnet_core::links::LinkError| CliError::validation(format!("links: {e}"), Some("links".into()));
        Ok(match self.link_kind()? {
            EnsembleKind::PromptBased => {
                EnsembleStrategy::prompt_based(&self.spec(self.links.backend.as_deref().unwrap_or_default()))
            }
            EnsembleKind::TemperatureBased => {
                EnsembleStrategy::temperature_based(&self.spec(self.links.backend.as_deref().unwrap_or_default()))
            }
            EnsembleKind::ModelBased => {
                let specs: Vec<BackendSpec> = self.links.backends.iter().map(|b| self.spec(b)).collect();
                EnsembleStrategy::model_based([&specs[0], &specs[1], &specs[2]]).map_err(invalid)?
            }
        })
    }

    pub fn detection_config(&self) -> DetectionConfig {
        DetectionConfig {
            k: self.detection.k,
            runs: self.detection.runs,
            rng_seed: self.detection.seed,
            context_before: self.detection.context_before,
            context_after: self.detection.context_after,
            lead_min: self.segmentation.lead_min,
            tail_min: self.segmentation.tail_min,
            parallelism: self.detection.parallelism,
            patient_only: self.detection.patient_only,
            ..DetectionConfig::default()
        }
    }

    /// Roster entries referenced by the pipeline stages, name to model id.
    pub fn roster(&self) -> BTreeMap<String, String> {
        self.backends
            .iter()
            .map(|(n, b)| (n.clone(), b.model_id.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[backends.llama]
kind = "mock"
model_id = "llama-3.1-70b-instruct"

[mock]
rules = "rules.json"

[detection]
backend = "llama"
k = 0

[clustering]
backend = "llama"

[links]
strategy = "temperature"
backend = "llama"
"#;

    #[test]
    fn parses_and_validates() {
        let mut c = PipelineConfig::from_toml(BASE).unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.mock.rules.as_deref(), Some(Path::new("/cfg/rules.json")));
        assert_eq!(c.paths.output, PathBuf::from("/cfg/out"));
        c.validate().unwrap();
        assert_eq!(c.ensemble().unwrap().kind, EnsembleKind::TemperatureBased);
    }

    #[test]
    fn missing_backend_names_key() {
        let text = BASE.replace("[clustering]\nbackend = \"llama\"", "[clustering]\nbackend = \"gpt\"");
        let err = PipelineConfig::from_toml(&text).unwrap().validate().unwrap_err();
        assert_eq!(err.key(), Some("clustering.backend"));
        assert!(err.to_string().contains("'gpt'"));
    }

    #[test]
    fn k_and_pool_checked() {
        let text = BASE.replace("k = 0", "k = 7");
        let err = PipelineConfig::from_toml(&text).unwrap().validate().unwrap_err();
        assert_eq!(err.key(), Some("detection.k"));
        let text = BASE.replace("k = 0", "k = 5");
        let err = PipelineConfig::from_toml(&text).unwrap().validate().unwrap_err();
        assert_eq!(err.key(), Some("detection.pool"));
    }

    #[test]
    fn overrides_apply() {
        let mut c = PipelineConfig::from_toml(BASE).unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            no_repair: true,
            strategy: Some("prompt".into()),
            ..Default::default()
        });
        assert_eq!((c.detection.seed, c.links.seed, c.clustering.repair), (9, 9, false));
        assert_eq!(c.link_kind().unwrap(), EnsembleKind::PromptBased);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml(&format!("{BASE}\n[extra]\nx = 1\n")).is_err());
    }
}
