//! Single-shot network generation used as a comparison point.
//!
//! One prompt asks for themes, membership and relationships at once. The
//! output is parsed as given: invalid relationships and unknown members are
//! dropped and logged, never repaired, and there is no voting.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;
use thiserror::Error;

use crate::cluster::{resolve_member, theme_id, Clustering, Diagnostics, ProcessItem, ThemeCluster, THEME_DEFINITION};
use crate::detect::PROCESS_DEFINITION;
use crate::links::{Edge, EdgeType, Strength, CONNECTION_DEFINITION, STRENGTH_DEFINITIONS, TYPE_DEFINITIONS};
use crate::llm_gateway::{BackendSpec, CompletionRequest, Gateway, GatewayError, SchemaId};
use crate::network::{assemble, NetworkError, PersonalNetwork, Provenance};
use crate::schemas::{connection_flag, process_strings, single_string};

pub const BASELINE_STRATEGY: &str = "baseline-direct";
pub const BASELINE_VARIANT: &str = "baseline";

const BASELINE_TEMPLATE: &str = "\
Task: You are a clinical psychologist. Your task is to perform a full, end-to-end clinical reasoning analysis based on a therapy dialogue, including annotated psychological processes.

Definitions:
- Psychological Process: $process_definition$
- Clinically Meaningful Theme: $theme_definition$
- Process Relationship:
  - Connection: $connection$
  - Relationship Type:
$types$
  - Strength of Relationship:
$strengths$

Input:
- Transcript: A therapy session dialogue (for context only; do not extract utterances).
- Psychological Processes: A list of psychological processes to be clustered.

Theme Generation Guidelines: (1) Each theme must be a short, complete sentence with clinical insight. (2) The sentence must convey a specific psychological function, conflict, or transformation.

Process Classification Guidelines: (1) Classify all listed processes under one or more themes based on thematic relevance. (2) Use only the processes listed in the input. (3) Each process must appear in at least one theme. (4) Each theme must contain at least two processes.

Inter-Theme Relationship Guidelines: (1) Determine whether a relationship exists between any two themes. (2) Use only the themes to generate relationships. (3) Provide a brief explanation (a few words) of the connection. (4) Analyze Theme A to Theme B and Theme B to Theme A separately.

Your Goals: (1) Theme Generation (2) Process Classification (3) Inter-Theme Relationship Analysis

Output Format:
{
  \"classified_processes\": {
    \"Theme 1\": { \"Title\": \"Theme A\", \"Processes\": [
      {\"Process\": \"Process 1\"}, {\"Process\": \"Process 3\"} ] },
    \"Theme 2\": { \"Title\": \"Theme B\", \"Processes\": [
      {\"Process\": \"Process 2\"} ] }
  },
  \"theme_relationships\": [
    { \"input_themes\": [\"Theme A\", \"Theme B\"], \"connection\": [1],
      \"type\": [\"excitatory\"], \"strength\": [\"strong\"],
      \"explanation\": \"...\" },
    { \"input_themes\": [\"Theme B\", \"Theme A\"], \"connection\": [1],
      \"type\": [\"inhibitory\"], \"strength\": [\"moderate\"],
      \"explanation\": \"...\" },
    { \"input_themes\": [\"Theme A\", \"Theme C\"], \"connection\": [0] }
  ]
}

Transcript: $transcript$

Listed Psychological Processes: $processes$

Generate the output.
";

fn indent(block: &str, by: &str) -> String {
    block
        .lines()
        .map(|l| format!("{by}{}", l.trim_start()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_baseline_prompt(transcript: &str, processes: &[ProcessItem]) -> String {
    let list: Vec<String> = processes.iter().map(ProcessItem::prompt_entry).collect();
    BASELINE_TEMPLATE
        .replace("$process_definition$", PROCESS_DEFINITION)
        .replace("$theme_definition$", THEME_DEFINITION)
        .replace("$connection$", CONNECTION_DEFINITION)
        .replace("$types$", &indent(TYPE_DEFINITIONS, "    "))
        .replace("$strengths$", &indent(STRENGTH_DEFINITIONS, "    "))
        .replace("$transcript$", transcript)
        .replace("$processes$", &serde_json::to_string(&list).expect("list serializes"))
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("need at least 2 processes, got {0}")]
    TooFewProcesses(usize),
    #[error("model output has no usable theme")]
    NoThemes,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutput {
    pub network: PersonalNetwork,
    /// Everything discarded from the raw output.
    pub dropped: Vec<String>,
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Turns a validated direct-network output into a network without repair.
pub fn parse_direct_output(
    session_id: &str,
    v: &Value,
    processes: &[ProcessItem],
    provenance: Provenance,
) -> Result<BaselineOutput, BaselineError> {
    let mut dropped = Vec::new();
    let mut clusters: Vec<ThemeCluster> = Vec::new();
    let mut by_title: BTreeMap<String, String> = BTreeMap::new();
    let empty = serde_json::Map::new();
    let classified = v
        .get("classified_processes")
        .and_then(Value::as_object)
        .unwrap_or(&empty);
    for (key, entry) in classified {
        let Some(title) = entry.get("Title").and_then(Value::as_str).map(str::trim) else {
            dropped.push(format!("theme entry '{key}' has no title"));
            continue;
        };
        if by_title.contains_key(&normalize(title)) {
            dropped.push(format!("duplicate theme title '{title}'"));
            continue;
        }
        let mut members = BTreeSet::new();
        for m in process_strings(entry.get("Processes")) {
            match resolve_member(&m, processes) {
                Some(id) => {
                    members.insert(id);
                }
                None => dropped.push(format!("unknown process '{m}' under '{title}'")),
            }
        }
        if members.is_empty() {
            dropped.push(format!("theme '{title}' has no known processes"));
            continue;
        }
        let id = theme_id(clusters.len());
        by_title.insert(normalize(title), id.clone());
        clusters.push(ThemeCluster {
            theme_id: id,
            label: title.to_string(),
            members,
        });
    }
    if clusters.is_empty() {
        return Err(BaselineError::NoThemes);
    }

    let mut edges: Vec<Edge> = Vec::new();
    let mut seen = BTreeSet::new();
    let rels = v
        .get("theme_relationships")
        .and_then(Value::as_array)
        .cloned()
        .unwrap_or_default();
    for r in &rels {
        let ends: Vec<&str> = r
            .get("input_themes")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        if connection_flag(r.get("connection")) != Some(true) {
            continue;
        }
        let [a, b] = ends[..] else {
            dropped.push(format!("relationship without two themes: {r}"));
            continue;
        };
        let (Some(s), Some(t)) = (by_title.get(&normalize(a)), by_title.get(&normalize(b))) else {
            dropped.push(format!("relationship names an unknown theme: '{a}' -> '{b}'"));
            continue;
        };
        if s == t {
            dropped.push(format!("self-loop on '{a}'"));
            continue;
        }
        if !seen.insert((s.clone(), t.clone())) {
            dropped.push(format!("duplicate relationship '{a}' -> '{b}'"));
            continue;
        }
        let edge_type = single_string(r.get("type")).and_then(|x| x.parse::<EdgeType>().ok());
        let strength = single_string(r.get("strength")).and_then(|x| x.parse::<Strength>().ok());
        let (Some(edge_type), Some(strength)) = (edge_type, strength) else {
            dropped.push(format!("relationship '{a}' -> '{b}' lacks a valid type or strength"));
            continue;
        };
        edges.push(Edge {
            source_theme: s.clone(),
            target_theme: t.clone(),
            edge_type,
            strength,
            explanation: r
                .get("explanation")
                .and_then(Value::as_str)
                .unwrap_or("")
                .trim()
                .to_string(),
            explanation_variant: BASELINE_VARIANT.to_string(),
            votes_for: None,
        });
    }
    for d in &dropped {
        tracing::info!(detail = %d, "baseline output dropped");
    }
    let clustering = Clustering {
        clusters,
        uncovered: BTreeSet::new(),
        diagnostics: Diagnostics::default(),
    };
    let network = assemble(session_id, &clustering, processes, &edges, provenance)?;
    Ok(BaselineOutput { network, dropped })
}

/// One call for the whole network.
pub fn direct_generate(
    gateway: &Gateway,
    session_id: &str,
    transcript: &str,
    processes: &[ProcessItem],
    backend: &BackendSpec,
    retries: usize,
) -> Result<BaselineOutput, BaselineError> {
    if processes.len() < 2 {
        return Err(BaselineError::TooFewProcesses(processes.len()));
    }
    let req = CompletionRequest::new(
        backend.clone(),
        build_baseline_prompt(transcript, processes),
        SchemaId::DirectNetwork,
    )
    .with_max_tokens(4096);
    let resp = gateway.complete_structured(&req, retries)?;
    let mut provenance = Provenance::new(BASELINE_STRATEGY);
    provenance
        .backends
        .insert(backend.name.clone(), backend.model_id.clone());
    parse_direct_output(session_id, &resp.parsed, processes, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::process_id;
    use crate::detect::DimensionLabel;
    use crate::llm_gateway::{MockBackend, MockRule, RuleTable};
    use crate::network::completeness;
    use serde_json::json;
    use std::sync::Arc;

    fn items(n: usize) -> Vec<ProcessItem> {
        (1..=n)
            .map(|i| ProcessItem {
                id: process_id(i),
                text: format!("text {i}"),
                dimensions: [DimensionLabel::Affect].into(),
                source_utterance_index: i,
            })
            .collect()
    }

    fn output() -> Value {
        json!({
            "classified_processes": {
                "Theme 1": {"Title": "Alpha", "Processes": [{"Process": "P001"}, {"Process": "P002"}, {"Process": "P099"}]},
                "Theme 2": {"Title": "Beta", "Processes": [{"Process": "P003"}]}
            },
            "theme_relationships": [
                {"input_themes": ["Alpha", "Beta"], "connection": [1], "type": ["excitatory"], "strength": ["strong"], "explanation": "x"},
                {"input_themes": ["Beta", "Beta"], "connection": [1], "type": ["inhibitory"], "strength": ["weak"], "explanation": "y"},
                {"input_themes": ["Beta", "Gamma"], "connection": [1], "type": ["inhibitory"], "strength": ["weak"], "explanation": "z"},
                {"input_themes": ["Alpha", "Beta"], "connection": [0]}
            ]
        })
    }

    #[test]
    fn drops_without_repair() {
        let ps = items(4);
        let out = parse_direct_output("s", &output(), &ps, Provenance::new(BASELINE_STRATEGY)).unwrap();
        assert_eq!(out.network.nodes.len(), 2);
        assert_eq!(out.network.edges.len(), 1);
        assert_eq!(out.network.edges[0].votes_for, None);
        assert_eq!(out.dropped.len(), 3);
        assert!(out.dropped.iter().any(|d| d.contains("self-loop")));
        // P004 omitted by the model stays omitted
        assert!((completeness(&out.network, &ps) - 0.75).abs() < 1e-12);
        // Beta keeps its single member
        assert_eq!(out.network.nodes[1].weight_w, 1);
    }

    #[test]
    fn prompt_has_filled_definitions() {
        let p = build_baseline_prompt("Patient: hi", &items(2));
        assert!(p.contains("perform a full, end-to-end clinical reasoning analysis"));
        assert!(!p.contains(": .."));
        assert!(p.contains("[\"P001: text 1\",\"P002: text 2\"]"));
        assert!(!p.contains('$'));
    }

    #[test]
    fn generate_through_gateway() {
        let g = Gateway::new(Arc::new(
            MockBackend::new(RuleTable {
                rules: vec![MockRule::new(SchemaId::DirectNetwork, output())],
            })
            .unwrap(),
        ));
        let b = BackendSpec::mock("m", "model");
        let out = direct_generate(&g, "s", "t", &items(4), &b, 2).unwrap();
        assert_eq!(out.network.provenance.strategy, BASELINE_STRATEGY);
        assert!(matches!(
            direct_generate(&g, "s", "t", &items(1), &b, 2),
            Err(BaselineError::TooFewProcesses(1))
        ));
    }
}
