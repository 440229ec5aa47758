//! Stage 3: directed, typed and explained edges between themes.
//!
//! Every ordered theme pair is put to a three-member ensemble. The three
//! opinions are combined by [`vote`]: an edge exists when at least two members
//! report a connection of the same type, its strength is the strongest value
//! among those members, and its explanation is drawn (seeded) from the
//! members holding that strength.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::detect::PROCESS_DEFINITION;
use crate::llm_gateway::{BackendSpec, CompletionRequest, Gateway, SchemaId};
use crate::schemas::{connection_flag, single_string};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeType {
    Excitatory,
    Inhibitory,
}

impl EdgeType {
    pub const ALL: [EdgeType; 2] = [EdgeType::Excitatory, EdgeType::Inhibitory];

    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeType::Excitatory => "excitatory",
            EdgeType::Inhibitory => "inhibitory",
        }
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EdgeType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "excitatory" => Ok(EdgeType::Excitatory),
            "inhibitory" => Ok(EdgeType::Inhibitory),
            _ => Err(format!("unknown relationship type '{s}'")),
        }
    }
}

/// Ordered weak < moderate < strong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Moderate,
    Strong,
}

impl Strength {
    pub const ALL: [Strength; 3] = [Strength::Weak, Strength::Moderate, Strength::Strong];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strength::Weak => "weak",
            Strength::Moderate => "moderate",
            Strength::Strong => "strong",
        }
    }
}

impl fmt::Display for Strength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strength {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "weak" => Ok(Strength::Weak),
            "moderate" => Ok(Strength::Moderate),
            "strong" => Ok(Strength::Strong),
            _ => Err(format!("unknown strength '{s}'")),
        }
    }
}

/// One ensemble member's answer for one ordered pair.
///
/// `edge_type`, `strength` and `explanation` are present iff `connected`.
/// An abstention is a failed query, recorded as not connected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOpinion {
    pub variant_id: String,
    pub source_theme: String,
    pub target_theme: String,
    pub connected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_type: Option<EdgeType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<Strength>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub abstained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LinkOpinion {
    pub fn none(variant_id: &str, source: &str, target: &str) -> Self {
        Self {
            variant_id: variant_id.to_string(),
            source_theme: source.to_string(),
            target_theme: target.to_string(),
            connected: false,
            edge_type: None,
            strength: None,
            explanation: None,
            abstained: false,
            error: None,
        }
    }

    pub fn connected(
        variant_id: &str,
        source: &str,
        target: &str,
        edge_type: EdgeType,
        strength: Strength,
        explanation: impl Into<String>,
    ) -> Self {
        Self {
            connected: true,
            edge_type: Some(edge_type),
            strength: Some(strength),
            explanation: Some(explanation.into()),
            ..Self::none(variant_id, source, target)
        }
    }

    pub fn abstention(variant_id: &str, source: &str, target: &str, error: impl Into<String>) -> Self {
        Self {
            abstained: true,
            error: Some(error.into()),
            ..Self::none(variant_id, source, target)
        }
    }

    pub fn pair(&self) -> (&str, &str) {
        (&self.source_theme, &self.target_theme)
    }

    /// `(type, strength)` when connected.
    pub fn typed(&self) -> Option<(EdgeType, Strength)> {
        match (self.connected, self.edge_type, self.strength) {
            (true, Some(t), Some(s)) => Some((t, s)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub source_theme: String,
    pub target_theme: String,
    pub edge_type: EdgeType,
    pub strength: Strength,
    pub explanation: String,
    pub explanation_variant: String,
    /// Size of the agreeing majority; absent for single-shot output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes_for: Option<u8>,
}

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("vote needs exactly 3 opinions, got {0}")]
    Arity(usize),
    #[error("opinions refer to different pairs: {0:?} and {1:?}")]
    MismatchedPair((String, String), (String, String)),
    #[error("a theme cannot link to itself: {0}")]
    SelfLoop(String),
    #[error("need at least 2 themes, got {0}")]
    TooFewThemes(usize),
    #[error("invalid ensemble: {0}")]
    InvalidStrategy(String),
}

fn check_triple(opinions: &[LinkOpinion]) -> Result<(&str, &str), LinkError> {
    if opinions.len() != 3 {
        return Err(LinkError::Arity(opinions.len()));
    }
    let (s, t) = opinions[0].pair();
    for o in &opinions[1..] {
        if o.pair() != (s, t) {
            return Err(LinkError::MismatchedPair(
                (s.to_string(), t.to_string()),
                (o.source_theme.clone(), o.target_theme.clone()),
            ));
        }
    }
    if s == t {
        return Err(LinkError::SelfLoop(s.to_string()));
    }
    Ok((s, t))
}

pub fn explanation_seed(seed: u64, source: &str, target: &str) -> u64 {
    derive_seed(&[&seed.to_le_bytes(), source.as_bytes(), target.as_bytes()])
}

/// Majority vote over exactly three opinions for one ordered pair.
///
/// The result does not depend on the order of `opinions`: candidates for the
/// explanation are sorted before the seeded draw.
pub fn vote(opinions: &[LinkOpinion], seed: u64) -> Result<Option<Edge>, LinkError> {
    let (source, target) = check_triple(opinions)?;
    let majority = EdgeType::ALL.iter().find_map(|&ty| {
        let members: Vec<&LinkOpinion> = opinions
            .iter()
            .filter(|o| o.typed().is_some_and(|(t, _)| t == ty))
            .collect();
        (members.len() >= 2).then_some((ty, members))
    });
    let Some((edge_type, members)) = majority else {
        return Ok(None);
    };
    let strength = members
        .iter()
        .filter_map(|o| o.strength)
        .max()
        .expect("majority members are connected");
    let mut candidates: Vec<(&str, &str)> = members
        .iter()
        .filter(|o| o.strength == Some(strength))
        .map(|o| (o.variant_id.as_str(), o.explanation.as_deref().unwrap_or("")))
        .collect();
    candidates.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(explanation_seed(seed, source, target));
    let (variant, explanation) = candidates[rng.gen_range(0..candidates.len())];
    Ok(Some(Edge {
        source_theme: source.to_string(),
        target_theme: target.to_string(),
        edge_type,
        strength,
        explanation: explanation.to_string(),
        explanation_variant: variant.to_string(),
        votes_for: Some(members.len() as u8),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptShots {
    Zero,
    One,
    Few,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub variant_id: String,
    pub backend: BackendSpec,
    pub shots: PromptShots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    PromptBased,
    ModelBased,
    TemperatureBased,
}

impl EnsembleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnsembleKind::PromptBased => "prompt_based",
            EnsembleKind::ModelBased => "model_based",
            EnsembleKind::TemperatureBased => "temperature_based",
        }
    }
}

impl FromStr for EnsembleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prompt" | "prompt_based" => Ok(EnsembleKind::PromptBased),
            "model" | "model_based" => Ok(EnsembleKind::ModelBased),
            "temperature" | "temperature_based" => Ok(EnsembleKind::TemperatureBased),
            _ => Err(format!("unknown ensemble strategy '{s}'")),
        }
    }
}

pub const ENSEMBLE_TEMPERATURES: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleStrategy {
    pub kind: EnsembleKind,
    pub members: [VariantSpec; 3],
}

impl EnsembleStrategy {
    /// Zero-, one- and few-shot prompts on one backend at temperature 0.
    pub fn prompt_based(backend: &BackendSpec) -> Self {
        let b = backend.clone().with_temperature(0.0);
        let v = |id: &str, shots| VariantSpec {
            variant_id: id.to_string(),
            backend: b.clone(),
            shots,
        };
        Self {
            kind: EnsembleKind::PromptBased,
            members: [
                v("zero_shot", PromptShots::Zero),
                v("one_shot", PromptShots::One),
                v("few_shot", PromptShots::Few),
            ],
        }
    }

    /// One zero-shot prompt on three distinct backends at temperature 0.
    pub fn model_based(backends: [&BackendSpec; 3]) -> Result<Self, LinkError> {
        let members = backends.map(|b| VariantSpec {
            variant_id: b.name.clone(),
            backend: b.clone().with_temperature(0.0),
            shots: PromptShots::Zero,
        });
        let s = Self {
            kind: EnsembleKind::ModelBased,
            members,
        };
        s.validate()?;
        Ok(s)
    }

    /// One zero-shot prompt on one backend at temperatures 0, 0.5 and 1.0.
    pub fn temperature_based(backend: &BackendSpec) -> Self {
        Self {
            kind: EnsembleKind::TemperatureBased,
            members: ENSEMBLE_TEMPERATURES.map(|t| VariantSpec {
                variant_id: format!("temperature_{t:.1}"),
                backend: backend.clone().with_temperature(t),
                shots: PromptShots::Zero,
            }),
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        let bad = |m: &str| Err(LinkError::InvalidStrategy(m.to_string()));
        let ids: std::collections::BTreeSet<&str> = self.members.iter().map(|m| m.variant_id.as_str()).collect();
        if ids.len() != 3 {
            return bad("variant ids must be distinct");
        }
        let [a, b, c] = &self.members;
        match self.kind {
            EnsembleKind::PromptBased => {
                let shots = [a.shots, b.shots, c.shots];
                if shots != [PromptShots::Zero, PromptShots::One, PromptShots::Few] {
                    return bad("prompt-based members must be zero-, one- and few-shot");
                }
                if a.backend != b.backend || b.backend != c.backend || a.backend.temperature != 0.0 {
                    return bad("prompt-based members share one backend at temperature 0");
                }
            }
            EnsembleKind::ModelBased => {
                let models: std::collections::BTreeSet<(&str, &str)> = self
                    .members
                    .iter()
                    .map(|m| (m.backend.name.as_str(), m.backend.model_id.as_str()))
                    .collect();
                let names: std::collections::BTreeSet<&str> =
                    self.members.iter().map(|m| m.backend.name.as_str()).collect();
                if models.len() != 3 || names.len() != 3 {
                    return bad("model-based members need three distinct backends");
                }
                if self
                    .members
                    .iter()
                    .any(|m| m.backend.temperature != 0.0 || m.shots != PromptShots::Zero)
                {
                    return bad("model-based members use one zero-shot prompt at temperature 0");
                }
            }
            EnsembleKind::TemperatureBased => {
                let temps = [a.backend.temperature, b.backend.temperature, c.backend.temperature];
                if temps != ENSEMBLE_TEMPERATURES {
                    return bad("temperature-based members run at 0, 0.5 and 1.0");
                }
                let same =
                    |x: &BackendSpec, y: &BackendSpec| x.name == y.name && x.model_id == y.model_id && x.kind == y.kind;
                if !same(&a.backend, &b.backend) || !same(&b.backend, &c.backend) {
                    return bad("temperature-based members share one backend");
                }
                if self.members.iter().any(|m| m.shots != PromptShots::Zero) {
                    return bad("temperature-based members use one zero-shot prompt");
                }
            }
        }
        Ok(())
    }
}

/// One row of the illustrative example table. `relation` is `None` for a
/// pair with no connection.
pub struct LinkExample {
    pub process_a: &'static str,
    pub process_b: &'static str,
    pub relation: Option<(EdgeType, Strength, &'static str)>,
}

pub const LINK_EXAMPLES: [LinkExample; 3] = [
    LinkExample {
        process_a: "Anxiety about future career prospects and financial security",
        process_b: "Fear of being stuck in a dead-end job",
        relation: Some((
            EdgeType::Excitatory,
            Strength::Strong,
            "The more anxious one feels about the future, the more trapped a stagnant job can seem",
        )),
    },
    LinkExample {
        process_a: "Susceptibility to peer pressure",
        process_b: "Sense of responsibility to support family members",
        relation: None,
    },
    LinkExample {
        process_a: "High self-compassion",
        process_b: "Guilt associated with prioritizing personal needs over others",
        relation: Some((
            EdgeType::Inhibitory,
            Strength::Strong,
            "High compassion promotes self-acceptance and emotional balance over self-criticism",
        )),
    },
];

fn render_link_example(ex: &LinkExample) -> String {
    let body = match ex.relation {
        Some((t, s, e)) => json!({"relationship": [{
            "input_processes": [ex.process_a, ex.process_b],
            "connection": [1],
            "relationship_type": t.as_str(),
            "strength_of_relationship": s.as_str(),
            "explanation": e,
        }]}),
        None => json!({"relationship": [{
            "input_processes": [ex.process_a, ex.process_b],
            "connection": [0],
        }]}),
    };
    format!(
        "Process A: {}\nProcess B: {}\nOutput: {}",
        ex.process_a, ex.process_b, body
    )
}

pub fn render_link_examples(shots: PromptShots) -> Option<String> {
    let rows: &[LinkExample] = match shots {
        PromptShots::Zero => return None,
        PromptShots::One => &LINK_EXAMPLES[..1],
        PromptShots::Few => &LINK_EXAMPLES[..],
    };
    Some(rows.iter().map(render_link_example).collect::<Vec<_>>().join("\n\n"))
}

pub const CONNECTION_DEFINITION: &str = "1: there is a relationship, 0: there is no relationship";

pub const TYPE_DEFINITIONS: &str = concat!(
    "  1) Excitatory: one process amplifies or reinforces the other.\n",
    "  2) Inhibitory: one process suppresses the other.",
);

pub const STRENGTH_DEFINITIONS: &str = concat!(
    "  1) Strong: The processes are closely related. One strongly influences the other in psychological functioning.\n",
    "  2) Moderate: The processes are meaningfully related, but the connection is less consistent or conditional. They are associated, but not tightly bound.\n",
    "  3) Weak: The relationship is minimal, indirect, or highly context-dependent. They may co-occur at times, but the link is loose or peripheral.",
);

const LINK_TEMPLATE: &str = "\
Task: You are a clinical psychologist and your task is to determine whether a relationship exists between Process A and Process B, and to generate information on the nature of that relationship.

Definitions:
- Psychological process: $definition$
- Connection: $connection$
- Type of relationship between two psychological processes:
$types$
- Strength of Relationship:
$strengths$

Guidelines
1. Given two processes, determine whether or not a relationship exists.
2. Provide a brief explanation of the connection. Avoid restating the processes themselves.

Output Structure: If a relationship exists from process A to process B, return the following structured output:
{
  \"relationship\": [
    {
      \"input_processes\": [\"Process A\", \"Process B\"],
      \"connection\": [1],
      \"relationship_type\": \"excitatory\" or \"inhibitory\",
      \"strength_of_relationship\": \"strong\", \"moderate\", or \"weak\",
      \"explanation\": \"A concise explanation of why this relationship exists.\"
    }
  ]
}

If no relationship exists from Process A to Process B, return:
{
  \"relationship\": [
    {
      \"input_processes\": [\"Process A\", \"Process B\"],
      \"connection\": [0]
    }
  ]
}
$examples$
Process A: $process_a$

Process B: $process_b$

Generate the output.
";

pub fn build_link_prompt(shots: PromptShots, process_a: &str, process_b: &str) -> String {
    let examples = match render_link_examples(shots) {
        Some(e) => format!("\nIllustrative Example:\n{e}\n"),
        None => String::new(),
    };
    LINK_TEMPLATE
        .replace("$definition$", PROCESS_DEFINITION)
        .replace("$connection$", CONNECTION_DEFINITION)
        .replace("$types$", TYPE_DEFINITIONS)
        .replace("$strengths$", STRENGTH_DEFINITIONS)
        .replace("$examples$", &examples)
        .replace("$process_a$", process_a)
        .replace("$process_b$", process_b)
}

/// Reads a validated link-opinion output.
pub fn parse_link_output(v: &Value, variant_id: &str, source: &str, target: &str) -> LinkOpinion {
    let r = v.get("relationship").and_then(|a| a.get(0));
    let field = |k: &str| r.and_then(|r| single_string(r.get(k)));
    if connection_flag(r.and_then(|r| r.get("connection"))) != Some(true) {
        return LinkOpinion::none(variant_id, source, target);
    }
    match (
        field("relationship_type").and_then(|s| s.parse().ok()),
        field("strength_of_relationship").and_then(|s| s.parse().ok()),
    ) {
        (Some(t), Some(s)) => LinkOpinion::connected(
            variant_id,
            source,
            target,
            t,
            s,
            field("explanation").unwrap_or_default().trim(),
        ),
        _ => LinkOpinion::abstention(variant_id, source, target, "connected output without type or strength"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeRef {
    pub theme_id: String,
    pub label: String,
}

impl ThemeRef {
    pub fn new(theme_id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            theme_id: theme_id.into(),
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOptions {
    pub seed: u64,
    pub max_tokens: u32,
    pub retries: usize,
    pub parallelism: usize,
}

impl Default for LinkOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_tokens: 512,
            retries: crate::llm_gateway::DEFAULT_RETRIES,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRun {
    /// Sorted by `(source_theme, target_theme)`.
    pub edges: Vec<Edge>,
    /// Grouped by pair in edge order, members in strategy order.
    pub opinions: Vec<LinkOpinion>,
}

pub struct LinkEngine<'a> {
    gateway: &'a Gateway,
    opts: LinkOptions,
}

impl<'a> LinkEngine<'a> {
    pub fn new(gateway: &'a Gateway, opts: LinkOptions) -> Self {
        Self { gateway, opts }
    }

    /// Never fails: gateway and schema errors become an abstention.
    pub fn query_opinion(&self, variant: &VariantSpec, a: &ThemeRef, b: &ThemeRef) -> LinkOpinion {
        let prompt = build_link_prompt(variant.shots, &a.label, &b.label);
        let req = CompletionRequest::new(variant.backend.clone(), prompt, SchemaId::LinkOpinion)
            .with_max_tokens(self.opts.max_tokens);
        match self.gateway.complete_structured(&req, self.opts.retries) {
            Ok(resp) => parse_link_output(&resp.parsed, &variant.variant_id, &a.theme_id, &b.theme_id),
            Err(e) => {
                tracing::warn!(variant = %variant.variant_id, source = %a.theme_id, target = %b.theme_id, error = %e, "link query abstained");
                LinkOpinion::abstention(&variant.variant_id, &a.theme_id, &b.theme_id, e.to_string())
            }
        }
    }

    /// Queries all ordered pairs with every member and votes each pair.
    pub fn run_ensemble(&self, strategy: &EnsembleStrategy, themes: &[ThemeRef]) -> Result<EnsembleRun, LinkError> {
        strategy.validate()?;
        if themes.len() < 2 {
            return Err(LinkError::TooFewThemes(themes.len()));
        }
        let mut sorted: Vec<&ThemeRef> = themes.iter().collect();
        sorted.sort_by(|a, b| a.theme_id.cmp(&b.theme_id));
        let mut jobs = Vec::with_capacity(sorted.len() * (sorted.len() - 1) * 3);
        for a in &sorted {
            for b in &sorted {
                if a.theme_id == b.theme_id {
                    continue;
                }
                for m in &strategy.members {
                    jobs.push((m, *a, *b));
                }
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.opts.parallelism.max(1))
            .build()
            .map_err(|e| LinkError::InvalidStrategy(e.to_string()))?;
        let opinions: Vec<LinkOpinion> =
            pool.install(|| jobs.par_iter().map(|(m, a, b)| self.query_opinion(m, a, b)).collect());
        let mut edges = Vec::new();
        for triple in opinions.chunks(3) {
            if let Some(e) = vote(triple, self.opts.seed)? {
                edges.push(e);
            }
        }
        Ok(EnsembleRun { edges, opinions })
    }
}

pub fn opinions_to_jsonl(opinions: &[LinkOpinion]) -> String {
    opinions
        .iter()
        .map(|o| serde_json::to_string(o).expect("opinion serializes") + "\n")
        .collect()
}

pub fn parse_opinion_log(text: &str) -> Result<Vec<LinkOpinion>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Groups a flat log by ordered pair, keeping log order within each group.
pub fn group_by_pair(opinions: &[LinkOpinion]) -> BTreeMap<(String, String), Vec<LinkOpinion>> {
    let mut out: BTreeMap<(String, String), Vec<LinkOpinion>> = BTreeMap::new();
    for o in opinions {
        out.entry((o.source_theme.clone(), o.target_theme.clone()))
            .or_default()
            .push(o.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub pairs: usize,
    pub unanimous_connection: usize,
    /// Pairs where all three members report a connection.
    pub all_connected: usize,
    pub unanimous_type: usize,
    pub unanimous_strength: usize,
    /// `None` when the denominator is zero.
    pub connection_pct: Option<f64>,
    /// Among pairs with all three connected.
    pub type_pct: Option<f64>,
    /// Among pairs with unanimous type.
    pub strength_pct: Option<f64>,
}

fn pct(n: usize, d: usize) -> Option<f64> {
    (d > 0).then(|| 100.0 * n as f64 / d as f64)
}

fn all_equal<T: PartialEq>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

pub fn agreement_stats(groups: &[Vec<LinkOpinion>]) -> Result<AgreementStats, LinkError> {
    let mut s = AgreementStats {
        pairs: groups.len(),
        unanimous_connection: 0,
        all_connected: 0,
        unanimous_type: 0,
        unanimous_strength: 0,
        connection_pct: None,
        type_pct: None,
        strength_pct: None,
    };
    for g in groups {
        check_triple(g)?;
        let conn: Vec<bool> = g.iter().map(|o| o.connected).collect();
        if !all_equal(&conn) {
            continue;
        }
        s.unanimous_connection += 1;
        if !conn[0] {
            continue;
        }
        s.all_connected += 1;
        let types: Vec<Option<EdgeType>> = g.iter().map(|o| o.edge_type).collect();
        if !all_equal(&types) {
            continue;
        }
        s.unanimous_type += 1;
        let strengths: Vec<Option<Strength>> = g.iter().map(|o| o.strength).collect();
        if all_equal(&strengths) {
            s.unanimous_strength += 1;
        }
    }
    s.connection_pct = pct(s.unanimous_connection, s.pairs);
    s.type_pct = pct(s.unanimous_type, s.all_connected);
    s.strength_pct = pct(s.unanimous_strength, s.unanimous_type);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{MockBackend, MockRule, RuleTable};
    use std::sync::Arc;
    use EdgeType::*;
    use Strength::*;

    fn op(v: &str, x: Option<(EdgeType, Strength)>) -> LinkOpinion {
        match x {
            Some((t, s)) => LinkOpinion::connected(v, "T01", "T02", t, s, format!("because {v}")),
            None => LinkOpinion::none(v, "T01", "T02"),
        }
    }

    #[test]
    fn enum_spellings() {
        assert_eq!(serde_json::to_string(&Excitatory).unwrap(), "\"excitatory\"");
        assert_eq!(serde_json::to_string(&Moderate).unwrap(), "\"moderate\"");
        assert_eq!("Inhibitory".parse::<EdgeType>(), Ok(Inhibitory));
        assert_eq!(" STRONG ".parse::<Strength>(), Ok(Strong));
        assert!("causal".parse::<EdgeType>().is_err());
        assert!(Weak < Moderate && Moderate < Strong);
    }

    #[test]
    fn majority_takes_strongest() {
        let e = vote(
            &[
                op("a", Some((Excitatory, Strong))),
                op("b", Some((Excitatory, Weak))),
                op("c", Some((Inhibitory, Moderate))),
            ],
            1,
        )
        .unwrap()
        .unwrap();
        assert_eq!((e.edge_type, e.strength, e.votes_for), (Excitatory, Strong, Some(2)));
        assert_eq!(e.explanation, "because a");
        assert_eq!(e.explanation_variant, "a");
    }

    #[test]
    fn no_majority_no_edge() {
        let r = vote(&[op("a", None), op("b", None), op("c", Some((Excitatory, Strong)))], 0).unwrap();
        assert_eq!(r, None);
        let split = vote(
            &[
                op("a", None),
                op("b", Some((Inhibitory, Weak))),
                op("c", Some((Excitatory, Strong))),
            ],
            0,
        )
        .unwrap();
        assert_eq!(split, None);
    }

    #[test]
    fn unanimity() {
        let e = vote(
            &[
                op("a", Some((Inhibitory, Weak))),
                op("b", Some((Inhibitory, Weak))),
                op("c", Some((Inhibitory, Weak))),
            ],
            9,
        )
        .unwrap()
        .unwrap();
        assert_eq!((e.edge_type, e.strength, e.votes_for), (Inhibitory, Weak, Some(3)));
    }

    #[test]
    fn vote_errors() {
        assert_eq!(vote(&[op("a", None)], 0), Err(LinkError::Arity(1)));
        let mut other = op("c", None);
        other.target_theme = "T03".into();
        assert!(matches!(
            vote(&[op("a", None), op("b", None), other], 0),
            Err(LinkError::MismatchedPair(..))
        ));
        let selfish: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|v| LinkOpinion::none(v, "T01", "T01"))
            .collect();
        assert_eq!(vote(&selfish, 0), Err(LinkError::SelfLoop("T01".into())));
    }

    #[test]
    fn explanation_draw_is_order_free() {
        let ops = [
            op("a", Some((Excitatory, Strong))),
            op("b", Some((Excitatory, Strong))),
            op("c", Some((Excitatory, Strong))),
        ];
        for seed in 0..20 {
            let base = vote(&ops, seed).unwrap();
            let rev: Vec<_> = ops.iter().rev().cloned().collect();
            assert_eq!(vote(&rev, seed).unwrap(), base);
        }
    }

    #[test]
    fn strategies_validate() {
        let b = BackendSpec::mock("llama", "llama-3.1");
        assert!(EnsembleStrategy::prompt_based(&b).validate().is_ok());
        let t = EnsembleStrategy::temperature_based(&b);
        assert!(t.validate().is_ok());
        assert_eq!(t.members[2].backend.temperature, 1.0);
        let q = BackendSpec::mock("qwen", "qwen2.5");
        let g = BackendSpec::mock("gpt", "gpt-4o-mini");
        assert!(EnsembleStrategy::model_based([&b, &q, &g]).is_ok());
        assert!(EnsembleStrategy::model_based([&b, &q, &b]).is_err());
        let mut bad = EnsembleStrategy::prompt_based(&b);
        bad.members[1].shots = PromptShots::Zero;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prompt_examples_by_shots() {
        let zero = build_link_prompt(PromptShots::Zero, "X", "Y");
        assert!(!zero.contains("Illustrative Example"));
        assert!(zero.ends_with("Process A: X\n\nProcess B: Y\n\nGenerate the output.\n"));
        let one = build_link_prompt(PromptShots::One, "X", "Y");
        assert_eq!(one.matches("Output: ").count(), 1);
        let few = build_link_prompt(PromptShots::Few, "X", "Y");
        assert_eq!(few.matches("Output: ").count(), 3);
        assert!(few.contains("\"connection\":[0]"));
    }

    #[test]
    fn parse_output_forms() {
        let v = serde_json::json!({"relationship": [{"connection": [1], "relationship_type": ["Inhibitory"],
            "strength_of_relationship": "weak", "explanation": " dampens "}]});
        let o = parse_link_output(&v, "m", "T01", "T02");
        assert_eq!(o.typed(), Some((Inhibitory, Weak)));
        assert_eq!(o.explanation.as_deref(), Some("dampens"));
        let n = parse_link_output(
            &serde_json::json!({"relationship": [{"connection": 0}]}),
            "m",
            "T01",
            "T02",
        );
        assert!(!n.connected && !n.abstained);
    }

    #[test]
    fn ensemble_queries_every_ordered_pair() {
        let g = Gateway::new(Arc::new(
            MockBackend::new(RuleTable {
                rules: vec![MockRule::new(
                    SchemaId::LinkOpinion,
                    serde_json::json!({"relationship": [{"connection": [0]}]}),
                )],
            })
            .unwrap(),
        ));
        let engine = LinkEngine::new(&g, LinkOptions::default());
        let s = EnsembleStrategy::temperature_based(&BackendSpec::mock("m", "m"));
        for (n, pairs) in [(2, 2), (5, 20)] {
            let themes: Vec<ThemeRef> = (0..n)
                .map(|i| ThemeRef::new(crate::cluster::theme_id(i), format!("Theme {i}")))
                .collect();
            let run = engine.run_ensemble(&s, &themes).unwrap();
            assert_eq!(run.opinions.len(), pairs * 3);
            assert!(run.edges.is_empty());
        }
        assert_eq!(
            engine.run_ensemble(&s, &[ThemeRef::new("T01", "x")]),
            Err(LinkError::TooFewThemes(1))
        );
    }

    #[test]
    fn failed_member_abstains() {
        let g = Gateway::new(Arc::new(MockBackend::new(RuleTable::default()).unwrap()));
        let engine = LinkEngine::new(&g, LinkOptions::default());
        let v = &EnsembleStrategy::prompt_based(&BackendSpec::mock("m", "m")).members[0];
        let o = engine.query_opinion(v, &ThemeRef::new("T01", "a"), &ThemeRef::new("T02", "b"));
        assert!(o.abstained && !o.connected && o.error.is_some());
    }

    #[test]
    fn agreement_cascade() {
        let unanimous = vec![
            op("a", Some((Excitatory, Strong))),
            op("b", Some((Excitatory, Strong))),
            op("c", Some((Excitatory, Strong))),
        ];
        let split = vec![op("a", None), op("b", Some((Excitatory, Strong))), op("c", None)];
        let s = agreement_stats(&[unanimous.clone(), split]).unwrap();
        assert_eq!(s.connection_pct, Some(50.0));
        assert_eq!(s.type_pct, Some(100.0));
        assert_eq!(s.strength_pct, Some(100.0));
        let none = vec![op("a", None), op("b", None), op("c", None)];
        let s = agreement_stats(&[none]).unwrap();
        assert_eq!(
            (s.connection_pct, s.type_pct, s.strength_pct),
            (Some(100.0), None, None)
        );
        assert!(agreement_stats(&[unanimous[..2].to_vec()]).is_err());
    }

    #[test]
    fn opinion_log_round_trip() {
        let ops = vec![
            op("a", Some((Excitatory, Weak))),
            LinkOpinion::abstention("b", "T01", "T02", "timeout"),
        ];
        let text = opinions_to_jsonl(&ops);
        assert_eq!(parse_opinion_log(&text).unwrap(), ops);
        assert_eq!(group_by_pair(&ops).len(), 1);
    }
}
