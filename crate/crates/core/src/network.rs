//! The personalized network: one node per theme, voted edges between them,
//! and its canonical JSON and DOT renderings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cluster::{Clustering, ProcessItem};
use crate::detect::DimensionLabel;
use crate::links::{Edge, EdgeType, Strength};

pub const NETWORK_VERSION: u32 = 1;
pub const MAX_TOP_DIMENSIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkNode {
    pub theme_id: String,
    pub label: String,
    /// Number of unique member processes.
    pub weight_w: usize,
    /// Most frequent member dimensions, descending; ties in canonical order.
    pub top_dimensions: Vec<DimensionLabel>,
    pub member_process_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub pipeline_version: String,
    pub strategy: String,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    /// Backend name to model id.
    #[serde(default)]
    pub backends: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(strategy: impl Into<String>) -> Self {
        Self {
            pipeline_version: env!("CARGO_PKG_VERSION").to_string(),
            strategy: strategy.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonalNetwork {
    pub session_id: String,
    /// Sorted by theme id.
    pub nodes: Vec<NetworkNode>,
    /// Sorted by (source, target).
    pub edges: Vec<Edge>,
    pub provenance: Provenance,
}

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("edge {source_theme} -> {target_theme} references unknown theme '{missing}'")]
    UnknownTheme {
        source_theme: String,
        target_theme: String,
        missing: String,
    },
    #[error("self-loop on theme '{0}'")]
    SelfLoop(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("duplicate node '{0}'")]
    DuplicateNode(String),
    #[error("node '{theme_id}' is inconsistent: {message}")]
    InconsistentNode { theme_id: String, message: String },
    #[error("edge {0} -> {1} has fewer than 2 votes")]
    WeakMajority(String, String),
    #[error("unsupported network version {found}, expected {expected}")]
    VersionMismatch { found: Value, expected: u32 },
    #[error("network document does not match the schema: {0}")]
    Schema(String),
}

/// Most frequent dimensions among the members, at most three.
pub fn top_dimensions<'a>(members: impl IntoIterator<Item = &'a ProcessItem>) -> Vec<DimensionLabel> {
    let mut counts = [0usize; 9];
    for p in members {
        for d in &p.dimensions {
            counts[*d as usize] += 1;
        }
    }
    let mut ranked: Vec<DimensionLabel> = DimensionLabel::ALL
        .into_iter()
        .filter(|d| counts[*d as usize] > 0)
        .collect();
    // stable sort keeps canonical order among equal counts
    ranked.sort_by(|a, b| counts[*b as usize].cmp(&counts[*a as usize]));
    ranked.truncate(MAX_TOP_DIMENSIONS);
    ranked
}

/// Builds one node per non-empty theme and attaches the voted edges.
pub fn assemble(
    session_id: &str,
    clustering: &Clustering,
    processes: &[ProcessItem],
    edges: &[Edge],
    provenance: Provenance,
) -> Result<PersonalNetwork, NetworkError> {
    let by_id: BTreeMap<&str, &ProcessItem> = processes.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut nodes: Vec<NetworkNode> = clustering
        .clusters
        .iter()
        .filter(|c| !c.members.is_empty())
        .map(|c| NetworkNode {
            theme_id: c.theme_id.clone(),
            label: c.label.clone(),
            weight_w: c.members.len(),
            top_dimensions: top_dimensions(c.members.iter().filter_map(|m| by_id.get(m.as_str()).copied())),
            member_process_ids: c.members.clone(),
        })
        .collect();
    nodes.sort_by(|a, b| a.theme_id.cmp(&b.theme_id));
    let mut edges = edges.to_vec();
    edges.sort_by(|a, b| (&a.source_theme, &a.target_theme).cmp(&(&b.source_theme, &b.target_theme)));
    let net = PersonalNetwork {
        session_id: session_id.to_string(),
        nodes,
        edges,
        provenance,
    };
    net.validate()?;
    Ok(net)
}

impl PersonalNetwork {
    pub fn node(&self, theme_id: &str) -> Option<&NetworkNode> {
        self.nodes.iter().find(|n| n.theme_id == theme_id)
    }

    /// Checks node bookkeeping and edge endpoints.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.theme_id.as_str()) {
                return Err(NetworkError::DuplicateNode(n.theme_id.clone()));
            }
            let bad = |m: &str| NetworkError::InconsistentNode {
                theme_id: n.theme_id.clone(),
                message: m.to_string(),
            };
            if n.weight_w != n.member_process_ids.len() {
                return Err(bad("weight_w differs from the member count"));
            }
            if n.weight_w == 0 {
                return Err(bad("node has no members"));
            }
            if n.top_dimensions.len() > MAX_TOP_DIMENSIONS {
                return Err(bad("more than three top dimensions"));
            }
            if n.top_dimensions.iter().collect::<BTreeSet<_>>().len() != n.top_dimensions.len() {
                return Err(bad("repeated top dimension"));
            }
        }
        let mut pairs = BTreeSet::new();
        for e in &self.edges {
            for end in [&e.source_theme, &e.target_theme] {
                if !ids.contains(end.as_str()) {
                    return Err(NetworkError::UnknownTheme {
                        source_theme: e.source_theme.clone(),
                        target_theme: e.target_theme.clone(),
                        missing: end.clone(),
                    });
                }
            }
            if e.source_theme == e.target_theme {
                return Err(NetworkError::SelfLoop(e.source_theme.clone()));
            }
            if !pairs.insert((&e.source_theme, &e.target_theme)) {
                return Err(NetworkError::DuplicateEdge(
                    e.source_theme.clone(),
                    e.target_theme.clone(),
                ));
            }
            if e.votes_for.is_some_and(|v| !(2..=3).contains(&v)) {
                return Err(NetworkError::WeakMajority(
                    e.source_theme.clone(),
                    e.target_theme.clone(),
                ));
            }
        }
        Ok(())
    }

    pub fn covered_processes(&self) -> BTreeSet<&str> {
        self.nodes
            .iter()
            .flat_map(|n| n.member_process_ids.iter().map(String::as_str))
            .collect()
    }
}

/// Share of input processes present in at least one node; 1.0 for no input.
pub fn completeness(network: &PersonalNetwork, processes: &[ProcessItem]) -> f64 {
    if processes.is_empty() {
        return 1.0;
    }
    let covered = network.covered_processes();
    let unique: BTreeSet<&str> = processes.iter().map(|p| p.id.as_str()).collect();
    unique.iter().filter(|id| covered.contains(*id)).count() as f64 / unique.len() as f64
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CanonicalDocument {
    version: u32,
    session_id: String,
    nodes: Vec<NetworkNode>,
    edges: Vec<Edge>,
    provenance: Provenance,
}

/// Pretty JSON with a fixed field order and a trailing newline.
pub fn export_canonical(network: &PersonalNetwork) -> String {
    let doc = CanonicalDocument {
        version: NETWORK_VERSION,
        session_id: network.session_id.clone(),
        nodes: network.nodes.clone(),
        edges: network.edges.clone(),
        provenance: network.provenance.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("network serializes") + "\n"
}

pub fn import_canonical(text: &str) -> Result<PersonalNetwork, NetworkError> {
    let raw: Value = serde_json::from_str(text).map_err(|e| NetworkError::Schema(e.to_string()))?;
    match raw.get("version") {
        Some(v) if v.as_u64() == Some(NETWORK_VERSION as u64) => {}
        Some(v) => {
            return Err(NetworkError::VersionMismatch {
                found: v.clone(),
                expected: NETWORK_VERSION,
            })
        }
        None => return Err(NetworkError::Schema("missing field `version`".into())),
    }
    let doc: CanonicalDocument = serde_json::from_value(raw).map_err(|e| NetworkError::Schema(e.to_string()))?;
    let net = PersonalNetwork {
        session_id: doc.session_id,
        nodes: doc.nodes,
        edges: doc.edges,
        provenance: doc.provenance,
    };
    net.validate()?;
    Ok(net)
}

/// Readability filters applied to the rendering only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DotOptions {
    pub min_strength: Option<Strength>,
    /// Keeps the heaviest nodes, ties to the smaller theme id.
    pub max_nodes: Option<usize>,
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

pub fn pen_width(s: Strength) -> u8 {
    match s {
        Strength::Weak => 1,
        Strength::Moderate => 2,
        Strength::Strong => 3,
    }
}

pub fn edge_style(t: EdgeType) -> &'static str {
    match t {
        EdgeType::Excitatory => "solid",
        EdgeType::Inhibitory => "dashed",
    }
}

pub fn export_dot(network: &PersonalNetwork, opts: &DotOptions) -> String {
    let mut kept: Vec<&NetworkNode> = network.nodes.iter().collect();
    if let Some(max) = opts.max_nodes {
        kept.sort_by(|a, b| b.weight_w.cmp(&a.weight_w).then_with(|| a.theme_id.cmp(&b.theme_id)));
        kept.truncate(max);
    }
    kept.sort_by(|a, b| a.theme_id.cmp(&b.theme_id));
    let ids: BTreeSet<&str> = kept.iter().map(|n| n.theme_id.as_str()).collect();

    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", dot_escape(&network.session_id));
    out.push_str("  rankdir=LR;\n");
    for n in &kept {
        let dims: Vec<&str> = n.top_dimensions.iter().map(|d| d.display_name()).collect();
        let label = format!(
            "{} (w={})\\n{}",
            dot_escape(&n.label),
            n.weight_w,
            dot_escape(&dims.join(", "))
        );
        let _ = writeln!(out, "  \"{}\" [label=\"{}\"];", dot_escape(&n.theme_id), label);
    }
    let mut edges: Vec<&Edge> = network
        .edges
        .iter()
        .filter(|e| ids.contains(e.source_theme.as_str()) && ids.contains(e.target_theme.as_str()))
        .filter(|e| opts.min_strength.is_none_or(|m| e.strength >= m))
        .collect();
    edges.sort_by(|a, b| (&a.source_theme, &a.target_theme).cmp(&(&b.source_theme, &b.target_theme)));
    for e in edges {
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [style={}, penwidth={}, label=\"{}\"];",
            dot_escape(&e.source_theme),
            dot_escape(&e.target_theme),
            edge_style(e.edge_type),
            pen_width(e.strength),
            e.edge_type
        );
    }
    out.push_str("}\n");
    out
}
