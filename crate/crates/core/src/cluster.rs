//! Stage 2: grouping processes into clinically meaningful themes.
//!
//! The two-step strategy first asks for a list of one-sentence themes and
//! then for an assignment of processes to those themes. The single-step
//! strategy asks for labels and membership at once. Both outputs go through
//! [`validate_clustering`] and, unless disabled, the deterministic repair
//! policy in [`ClusterEngine::repair_clustering`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::detect::{AnnotationRecord, DimensionLabel};
use crate::llm_gateway::{BackendSpec, CompletionRequest, Gateway, GatewayError, SchemaId};
use crate::schemas::process_strings;
use crate::transcript::Session;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessItem {
    pub id: String,
    pub text: String,
    pub dimensions: BTreeSet<DimensionLabel>,
    pub source_utterance_index: usize,
}

impl ProcessItem {
    /// The form used in prompt process lists, `"<id>: <text>"`.
    pub fn prompt_entry(&self) -> String {
        format!("{}: {}", self.id, self.text)
    }
}

pub fn process_id(utterance_index: usize) -> String {
    format!("P{utterance_index:03}")
}

/// One process per positive annotation, carrying the source utterance text.
pub fn process_items(session: &Session, annotations: &[AnnotationRecord]) -> Vec<ProcessItem> {
    let mut seen = BTreeSet::new();
    annotations
        .iter()
        .filter(|a| a.is_process && a.error.is_none())
        .filter(|a| seen.insert(a.utterance_index))
        .filter_map(|a| {
            session.utterances.get(a.utterance_index).map(|u| ProcessItem {
                id: process_id(a.utterance_index),
                text: u.text.clone(),
                dimensions: a.dimensions.clone(),
                source_utterance_index: a.utterance_index,
            })
        })
        .collect()
}

pub fn theme_id(position: usize) -> String {
    format!("T{:02}", position + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeCluster {
    pub theme_id: String,
    pub label: String,
    pub members: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Uncovered { process_id: String },
    Undersized { theme_id: String, size: usize },
    Degenerate { theme_id: String },
    UnknownMember { theme_id: String, member: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RepairAction {
    /// Re-query restricted to existing themes assigned these processes.
    Requery {
        assigned: Vec<(String, String)>,
    },
    OverlapAssign {
        process_id: String,
        theme_id: String,
    },
    Merged {
        from: String,
        into: String,
    },
    Dropped {
        theme_id: String,
    },
    DegeneracyRequery {
        resolved: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Violations found before repair.
    pub violations: Vec<Violation>,
    pub repairs: Vec<RepairAction>,
    /// Model output that was discarded while parsing.
    pub discarded: Vec<String>,
    /// Violations accepted after repair.
    pub unresolved: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    pub clusters: Vec<ThemeCluster>,
    pub uncovered: BTreeSet<String>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

impl Clustering {
    pub fn covered(&self) -> BTreeSet<String> {
        self.clusters.iter().flat_map(|c| c.members.iter().cloned()).collect()
    }

    pub fn themes(&self) -> Vec<(String, String)> {
        self.clusters
            .iter()
            .map(|c| (c.theme_id.clone(), c.label.clone()))
            .collect()
    }

    fn cluster_mut(&mut self, theme_id: &str) -> Option<&mut ThemeCluster> {
        self.clusters.iter_mut().find(|c| c.theme_id == theme_id)
    }

    fn refresh_uncovered(&mut self, processes: &[ProcessItem]) {
        let covered = self.covered();
        self.uncovered = processes
            .iter()
            .filter(|p| !covered.contains(&p.id))
            .map(|p| p.id.clone())
            .collect();
    }
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least {needed} processes, got {got}")]
    TooFewProcesses { needed: usize, got: usize },
    #[error("no themes to assign processes to")]
    NoThemes,
    #[error("model returned no usable themes")]
    EmptyThemes,
    #[error("clustering cannot be repaired: {0}")]
    Unresolvable(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Reports uncovered processes, themes with fewer than two members,
/// members that are not input processes, and a single cluster holding every
/// process when there are at least three.
pub fn validate_clustering(c: &Clustering, processes: &[ProcessItem]) -> Vec<Violation> {
    let ids: BTreeSet<&str> = processes.iter().map(|p| p.id.as_str()).collect();
    let mut out = Vec::new();
    for cl in &c.clusters {
        for m in &cl.members {
            if !ids.contains(m.as_str()) {
                out.push(Violation::UnknownMember {
                    theme_id: cl.theme_id.clone(),
                    member: m.clone(),
                });
            }
        }
    }
    let covered = c.covered();
    for p in processes {
        if !covered.contains(&p.id) {
            out.push(Violation::Uncovered {
                process_id: p.id.clone(),
            });
        }
    }
    for cl in &c.clusters {
        if cl.members.len() < 2 {
            out.push(Violation::Undersized {
                theme_id: cl.theme_id.clone(),
                size: cl.members.len(),
            });
        }
    }
    if processes.len() >= 3 {
        for cl in &c.clusters {
            if ids.iter().all(|id| cl.members.contains(*id)) {
                out.push(Violation::Degenerate {
                    theme_id: cl.theme_id.clone(),
                });
            }
        }
    }
    out
}

fn is_degenerate(c: &Clustering, processes: &[ProcessItem]) -> bool {
    validate_clustering(c, processes)
        .iter()
        .any(|v| matches!(v, Violation::Degenerate { .. }))
}

/// Share of processes that belong to two or more clusters. The process
/// universe is every clustered member plus the uncovered set.
pub fn multi_membership_rate(c: &Clustering) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for cl in &c.clusters {
        for m in &cl.members {
            *counts.entry(m.as_str()).or_default() += 1;
        }
    }
    for u in &c.uncovered {
        counts.entry(u.as_str()).or_default();
    }
    if counts.is_empty() {
        return 0.0;
    }
    counts.values().filter(|&&n| n >= 2).count() as f64 / counts.len() as f64
}

/// Maps a model-written member string back to a process id.
pub fn resolve_member(s: &str, processes: &[ProcessItem]) -> Option<String> {
    let s = s.trim().trim_matches(|c| c == '"' || c == '\'');
    let by_id = |cand: &str| {
        processes
            .iter()
            .find(|p| p.id.eq_ignore_ascii_case(cand.trim()))
            .map(|p| p.id.clone())
    };
    if let Some(id) = by_id(s) {
        return Some(id);
    }
    if let Some((head, _)) = s.split_once(':') {
        if let Some(id) = by_id(head) {
            return Some(id);
        }
    }
    processes
        .iter()
        .find(|p| p.text.trim().eq_ignore_ascii_case(s))
        .map(|p| p.id.clone())
}

fn normalize_label(s: &str) -> String {
    s.trim()
        .trim_matches(|c| c == '[' || c == ']' || c == '"')
        .trim()
        .to_lowercase()
}

/// Parses a theme-assignment object. With `themes` given, entries naming
/// other themes are discarded and clusters follow the given order;
/// otherwise themes are taken from the output in order of appearance.
pub fn parse_assignment(
    value: &Value,
    processes: &[ProcessItem],
    themes: Option<&[String]>,
) -> (Vec<ThemeCluster>, Vec<String>) {
    let mut discarded = Vec::new();
    let mut labels: Vec<String> = themes.map(|t| t.to_vec()).unwrap_or_default();
    let mut members: Vec<BTreeSet<String>> = vec![BTreeSet::new(); labels.len()];
    let Some(obj) = value.as_object() else {
        return (Vec::new(), vec!["assignment output is not an object".into()]);
    };
    for (key, entry) in obj {
        let Some(label) = entry.get("Theme").and_then(Value::as_str) else {
            discarded.push(format!("entry '{key}' has no theme label"));
            continue;
        };
        let norm = normalize_label(label);
        let slot = match labels.iter().position(|l| normalize_label(l) == norm) {
            Some(i) => i,
            None if themes.is_none() && !norm.is_empty() => {
                labels.push(label.trim().to_string());
                members.push(BTreeSet::new());
                labels.len() - 1
            }
            None => {
                discarded.push(format!("theme not in provided list: '{label}'"));
                continue;
            }
        };
        for m in process_strings(entry.get("Processes")) {
            match resolve_member(&m, processes) {
                Some(id) => {
                    members[slot].insert(id);
                }
                None => discarded.push(format!("unknown process '{m}' under '{label}'")),
            }
        }
    }
    for d in &discarded {
        tracing::info!(detail = %d, "discarded clustering output");
    }
    let clusters = labels
        .into_iter()
        .zip(members)
        .enumerate()
        .map(|(i, (label, members))| ThemeCluster {
            theme_id: theme_id(i),
            label,
            members,
        })
        .collect();
    (clusters, discarded)
}

pub const THEME_DEFINITION: &str = "A theme represents a meaningful pattern across psychological processes that reflects underlying functions or dynamics within the client's experience.";

const GENERATE_THEMES_TEMPLATE: &str = "\
You are a clinical psychologist analyzing a therapy session transcript.

Task: Generate clinically meaningful themes in a clear, one-sentence description.

A clinically meaningful theme: $definition$

Input:
- A transcript excerpt from a therapy session (for context only).
- List of psychological processes to be clustered.

Your goal:
1. Read the transcript excerpt to understand the emotional and interpersonal context. Do not quote or extract specific utterances.
2. Generate clinically meaningful themes based on the listed psychological processes.

Guidelines for writing themes:
1. Each theme must be a complete, short, concise statement.
2. Avoid generalities, labels that are not clinically informative.
3. The short sentence must convey a specific psychological function, conflict, or transformation linking the processes in the cluster.
4. Return output only as a list in this format: [theme_1, theme_2, ..., theme_n]

Therapy session transcript:
$transcript$

List of processes: $processes$
";

const ASSIGNMENT_FORMAT: &str = "\
{
  \"Theme 1\": {
    \"Theme\": \"[Provided Theme A]\",
    \"Processes\": [\"Process 1\", \"Process 2\"]
  },
  \"Theme 2\": {
    \"Theme\": \"[Provided Theme B]\",
    \"Processes\": [\"Process 1\", \"Process 2\"]
  }
}";

const ASSIGN_TEMPLATE: &str = "\
Task: You are a clinical psychologist classifying psychological processes based on provided themes.

A clinically meaningful theme: $definition$

Input: 1) A transcript excerpt from a therapy session (for context only). 2) A list of psychological processes to be clustered. 3) A set of themes under which the processes should be categorized.

Your goal:
1. Read the transcript excerpt to understand the emotional and interpersonal context. Do not quote or extract specific utterances.
2. Classify each listed psychological process under one or more of the provided themes based on their thematic relevance.

Guidelines for clustering:
1. Use only the processes listed under \"Listed Process to be Clustered\".
2. Every process must appear at least in one cluster.
3. A process may belong to multiple clusters only if it's strongly relevant to the theme.
4. Each provided theme must have at least 2 relevant processes assigned to it.
5. Do not put all processes in one cluster.

Format for the output:
$format$

Therapy session transcript:
$transcript$

List of processes: $processes$

Provided themes: $themes$
";

const SINGLE_STEP_TEMPLATE: &str = "\
You are a clinical psychologist analyzing a therapy session transcript.

Task: Group the listed psychological processes into clinically meaningful themes and give each group a clear, one-sentence theme label, in a single step.

A clinically meaningful theme: $definition$

Input:
- A transcript excerpt from a therapy session (for context only).
- List of psychological processes to be clustered.

Guidelines:
1. Read the transcript excerpt to understand the emotional and interpersonal context. Do not quote or extract specific utterances.
2. Each theme must be a complete, short, concise statement that conveys a specific psychological function, conflict, or transformation.
3. Use only the processes listed under \"Listed Process to be Clustered\".
4. Every process must appear at least in one cluster.
5. A process may belong to multiple clusters only if it's strongly relevant to the theme.
6. Each theme must have at least 2 relevant processes assigned to it.
7. Do not put all processes in one cluster.

Format for the output:
$format$

Therapy session transcript:
$transcript$

List of processes: $processes$
";

const REASSIGN_TEMPLATE: &str = "\
Task: You are a clinical psychologist. The psychological processes below were not assigned to any theme. Assign each of them to the most relevant of the provided themes. Use only the provided themes and only the listed processes.

Format for the output:
$format$

Therapy session transcript:
$transcript$

List of processes: $processes$

Provided themes: $themes$
";

/// Appended to the assignment prompt when every process landed in one cluster.
pub const DEGENERACY_CORRECTION: &str = "\n\nCorrection: the previous assignment put all processes in one cluster. Distribute the processes across the provided themes so that no single theme contains every process.";

fn json_list<S: Serialize>(items: &[S]) -> String {
    serde_json::to_string(items).expect("list serializes")
}

fn process_list(processes: &[ProcessItem]) -> String {
    json_list(&processes.iter().map(ProcessItem::prompt_entry).collect::<Vec<_>>())
}

pub fn build_generate_themes_prompt(transcript: &str, processes: &[ProcessItem]) -> String {
    GENERATE_THEMES_TEMPLATE
        .replace("$definition$", THEME_DEFINITION)
        .replace("$transcript$", transcript)
        .replace("$processes$", &process_list(processes))
}

pub fn build_assign_prompt(transcript: &str, processes: &[ProcessItem], themes: &[String]) -> String {
    ASSIGN_TEMPLATE
        .replace("$definition$", THEME_DEFINITION)
        .replace("$format$", ASSIGNMENT_FORMAT)
        .replace("$transcript$", transcript)
        .replace("$processes$", &process_list(processes))
        .replace("$themes$", &json_list(themes))
}

pub fn build_single_step_prompt(transcript: &str, processes: &[ProcessItem]) -> String {
    SINGLE_STEP_TEMPLATE
        .replace("$definition$", THEME_DEFINITION)
        .replace(
            "$format$",
            &ASSIGNMENT_FORMAT
                .replace("[Provided Theme A]", "Theme A")
                .replace("[Provided Theme B]", "Theme B"),
        )
        .replace("$transcript$", transcript)
        .replace("$processes$", &process_list(processes))
}

pub fn build_reassign_prompt(transcript: &str, processes: &[ProcessItem], themes: &[String]) -> String {
    REASSIGN_TEMPLATE
        .replace("$format$", ASSIGNMENT_FORMAT)
        .replace("$transcript$", transcript)
        .replace("$processes$", &process_list(processes))
        .replace("$themes$", &json_list(themes))
}

fn dimension_counts(c: &ThemeCluster, by_id: &BTreeMap<&str, &ProcessItem>) -> [f64; 9] {
    let mut v = [0.0; 9];
    for m in &c.members {
        if let Some(p) = by_id.get(m.as_str()) {
            for d in &p.dimensions {
                v[*d as usize] += 1.0;
            }
        }
    }
    v
}

fn cosine(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Position of the most frequent dimension (ties to the canonical order).
fn top_dimension(v: &[f64; 9]) -> Option<usize> {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return None;
    }
    v.iter().position(|&x| x == max)
}

/// Theme whose member dimension profile is closest (cosine) to the process.
/// Ties go to the theme whose top dimension comes first canonically, then to
/// the smaller theme id.
pub fn best_theme_by_overlap(c: &Clustering, process: &ProcessItem, processes: &[ProcessItem]) -> Option<String> {
    let by_id: BTreeMap<&str, &ProcessItem> = processes.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut pv = [0.0; 9];
    for d in &process.dimensions {
        pv[*d as usize] = 1.0;
    }
    let mut scored: Vec<(f64, usize, &str)> = c
        .clusters
        .iter()
        .map(|cl| {
            let tv = dimension_counts(cl, &by_id);
            (
                cosine(&pv, &tv),
                top_dimension(&tv).unwrap_or(usize::MAX),
                cl.theme_id.as_str(),
            )
        })
        .collect();
    scored.sort_by(|a, b| {
        if (a.0 - b.0).abs() > 1e-12 {
            b.0.total_cmp(&a.0)
        } else {
            (a.1, a.2).cmp(&(b.1, b.2))
        }
    });
    scored.first().map(|s| s.2.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    pub repair: bool,
    pub max_tokens: u32,
    pub retries: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            repair: true,
            max_tokens: 2048,
            retries: crate::llm_gateway::DEFAULT_RETRIES,
        }
    }
}

pub struct ClusterEngine<'a> {
    gateway: &'a Gateway,
    backend: BackendSpec,
    opts: ClusterOptions,
}

impl<'a> ClusterEngine<'a> {
    pub fn new(gateway: &'a Gateway, backend: BackendSpec, opts: ClusterOptions) -> Self {
        Self { gateway, backend, opts }
    }

    fn ask(&self, prompt: String, schema: SchemaId) -> Result<Value, GatewayError> {
        let req = CompletionRequest::new(self.backend.clone(), prompt, schema).with_max_tokens(self.opts.max_tokens);
        Ok(self.gateway.complete_structured(&req, self.opts.retries)?.parsed)
    }

    /// Step one: a de-duplicated list of one-sentence themes.
    pub fn generate_themes(&self, transcript: &str, processes: &[ProcessItem]) -> Result<Vec<String>, ClusterError> {
        if processes.len() < 2 {
            return Err(ClusterError::TooFewProcesses {
                needed: 2,
                got: processes.len(),
            });
        }
        let v = self.ask(build_generate_themes_prompt(transcript, processes), SchemaId::ThemeList)?;
        let mut seen = BTreeSet::new();
        let themes: Vec<String> = v
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(Value::as_str)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
            .collect();
        if themes.is_empty() {
            return Err(ClusterError::EmptyThemes);
        }
        Ok(themes)
    }

    /// Step two: assignment of processes to the given themes, followed by
    /// validation and (optionally) repair.
    pub fn assign_processes(
        &self,
        transcript: &str,
        processes: &[ProcessItem],
        themes: &[String],
    ) -> Result<Clustering, ClusterError> {
        if themes.is_empty() {
            return Err(ClusterError::NoThemes);
        }
        let v = self.ask(
            build_assign_prompt(transcript, processes, themes),
            SchemaId::ThemeAssignment,
        )?;
        let (clusters, discarded) = parse_assignment(&v, processes, Some(themes));
        self.finish(transcript, processes, clusters, discarded)
    }

    pub fn two_step(&self, transcript: &str, processes: &[ProcessItem]) -> Result<Clustering, ClusterError> {
        let themes = self.generate_themes(transcript, processes)?;
        self.assign_processes(transcript, processes, &themes)
    }

    pub fn single_step_cluster(&self, transcript: &str, processes: &[ProcessItem]) -> Result<Clustering, ClusterError> {
        if processes.is_empty() {
            return Err(ClusterError::TooFewProcesses { needed: 1, got: 0 });
        }
        let v = self.ask(
            build_single_step_prompt(transcript, processes),
            SchemaId::ThemeAssignment,
        )?;
        let (clusters, discarded) = parse_assignment(&v, processes, None);
        if clusters.is_empty() {
            return Err(ClusterError::EmptyThemes);
        }
        self.finish(transcript, processes, clusters, discarded)
    }

    fn finish(
        &self,
        transcript: &str,
        processes: &[ProcessItem],
        clusters: Vec<ThemeCluster>,
        discarded: Vec<String>,
    ) -> Result<Clustering, ClusterError> {
        let mut c = Clustering {
            clusters,
            uncovered: BTreeSet::new(),
            diagnostics: Diagnostics {
                discarded,
                ..Default::default()
            },
        };
        c.refresh_uncovered(processes);
        c.diagnostics.violations = validate_clustering(&c, processes);
        if self.opts.repair && !c.diagnostics.violations.is_empty() {
            c = self.repair_clustering(c, processes, transcript)?;
        } else if !self.opts.repair {
            c.diagnostics.unresolved = c.diagnostics.violations.clone();
        }
        Ok(c)
    }

    /// Assigns uncovered processes: one re-query restricted to the existing
    /// themes, then the dimension-overlap fallback for anything still left.
    fn cover(
        &self,
        c: &mut Clustering,
        targets: &[String],
        processes: &[ProcessItem],
        transcript: &str,
    ) -> Result<(), ClusterError> {
        let covered = c.covered();
        let pending: Vec<ProcessItem> = processes
            .iter()
            .filter(|p| targets.contains(&p.id) && !covered.contains(&p.id))
            .cloned()
            .collect();
        if pending.is_empty() {
            return Ok(());
        }
        if c.clusters.is_empty() {
            return Err(ClusterError::Unresolvable(format!(
                "{} uncovered processes and no themes left",
                pending.len()
            )));
        }
        let labels: Vec<String> = c.clusters.iter().map(|t| t.label.clone()).collect();
        let prompt = build_reassign_prompt(transcript, &pending, &labels);
        match self.ask(prompt, SchemaId::ThemeAssignment) {
            Ok(v) => {
                let (parsed, discarded) = parse_assignment(&v, &pending, Some(&labels));
                c.diagnostics.discarded.extend(discarded);
                let mut assigned = Vec::new();
                for (slot, t) in parsed.into_iter().enumerate() {
                    let tid = c.clusters[slot].theme_id.clone();
                    for m in t.members {
                        if c.clusters[slot].members.insert(m.clone()) {
                            assigned.push((m, tid.clone()));
                        }
                    }
                }
                c.diagnostics.repairs.push(RepairAction::Requery { assigned });
            }
            Err(e) => {
                tracing::warn!(error = %e, "re-query for uncovered processes failed");
                c.diagnostics.discarded.push(format!("re-query failed: {e}"));
            }
        }
        let covered = c.covered();
        for p in pending.iter().filter(|p| !covered.contains(&p.id)) {
            let tid = best_theme_by_overlap(c, p, processes).ok_or(ClusterError::NoThemes)?;
            c.cluster_mut(&tid).expect("theme exists").members.insert(p.id.clone());
            c.diagnostics.repairs.push(RepairAction::OverlapAssign {
                process_id: p.id.clone(),
                theme_id: tid,
            });
        }
        Ok(())
    }

    /// Merges or drops themes with fewer than two members.
    fn fix_undersized(
        &self,
        c: &mut Clustering,
        processes: &[ProcessItem],
        transcript: &str,
    ) -> Result<(), ClusterError> {
        while let Some(pos) = c.clusters.iter().position(|t| t.members.len() < 2) {
            let small = c.clusters.remove(pos);
            let target = c
                .clusters
                .iter()
                .map(|t| {
                    (
                        t.members.intersection(&small.members).count(),
                        t.members.len(),
                        &t.theme_id,
                    )
                })
                .filter(|(overlap, _, _)| *overlap > 0)
                .max_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then_with(|| b.2.cmp(a.2)))
                .map(|(_, _, id)| id.clone());
            match target {
                Some(into) => {
                    c.cluster_mut(&into)
                        .expect("theme exists")
                        .members
                        .extend(small.members.iter().cloned());
                    c.diagnostics.repairs.push(RepairAction::Merged {
                        from: small.theme_id,
                        into,
                    });
                }
                None => {
                    c.diagnostics.repairs.push(RepairAction::Dropped {
                        theme_id: small.theme_id.clone(),
                    });
                    let orphans: Vec<String> = small.members.into_iter().collect();
                    self.cover(c, &orphans, processes, transcript)?;
                }
            }
        }
        Ok(())
    }

    fn repair_structure(
        &self,
        c: &mut Clustering,
        processes: &[ProcessItem],
        transcript: &str,
    ) -> Result<(), ClusterError> {
        let ids: BTreeSet<&str> = processes.iter().map(|p| p.id.as_str()).collect();
        for cl in &mut c.clusters {
            cl.members.retain(|m| ids.contains(m.as_str()));
        }
        let all: Vec<String> = processes.iter().map(|p| p.id.clone()).collect();
        self.cover(c, &all, processes, transcript)?;
        self.fix_undersized(c, processes, transcript)?;
        c.refresh_uncovered(processes);
        Ok(())
    }

    /// Repairs coverage, undersized themes and single-cluster degeneracy.
    ///
    /// Uncovered processes get one re-query against the existing themes and
    /// then fall back to the closest dimension profile. Themes with fewer
    /// than two members merge into the theme sharing the most members, or are
    /// dropped with their member reassigned. A degenerate clustering gets one
    /// corrective re-query; if that does not help, it is kept and the
    /// violation is recorded.
    pub fn repair_clustering(
        &self,
        mut c: Clustering,
        processes: &[ProcessItem],
        transcript: &str,
    ) -> Result<Clustering, ClusterError> {
        if processes.is_empty() {
            return Ok(c);
        }
        if processes.len() < 2 {
            return Err(ClusterError::Unresolvable(
                "a single process cannot fill a theme of two".into(),
            ));
        }
        // Themes dropped during repair stay on offer for the corrective query.
        let labels: Vec<String> = c.clusters.iter().map(|t| t.label.clone()).collect();
        self.repair_structure(&mut c, processes, transcript)?;

        if is_degenerate(&c, processes) {
            let prompt = build_assign_prompt(transcript, processes, &labels) + DEGENERACY_CORRECTION;
            let retry = match self.ask(prompt, SchemaId::ThemeAssignment) {
                Ok(v) => {
                    let (clusters, discarded) = parse_assignment(&v, processes, Some(&labels));
                    let mut alt = Clustering {
                        clusters,
                        uncovered: BTreeSet::new(),
                        diagnostics: c.diagnostics.clone(),
                    };
                    alt.diagnostics.discarded.extend(discarded);
                    match self.repair_structure(&mut alt, processes, transcript) {
                        Ok(()) if !is_degenerate(&alt, processes) => Some(alt),
                        _ => None,
                    }
                }
                Err(e) => {
                    tracing::warn!(error = %e, "degeneracy re-query failed");
                    None
                }
            };
            match retry {
                Some(mut alt) => {
                    alt.diagnostics
                        .repairs
                        .push(RepairAction::DegeneracyRequery { resolved: true });
                    c = alt;
                }
                None => {
                    c.diagnostics
                        .repairs
                        .push(RepairAction::DegeneracyRequery { resolved: false });
                }
            }
        }

        let remaining = validate_clustering(&c, processes);
        if remaining.iter().any(|v| !matches!(v, Violation::Degenerate { .. })) {
            return Err(ClusterError::Unresolvable(format!("{remaining:?}")));
        }
        c.diagnostics.unresolved = remaining;
        Ok(c)
    }
}

/// The clustering document written between stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringDocument {
    pub version: u32,
    pub session_id: String,
    pub strategy: String,
    pub repair: bool,
    pub processes: Vec<ProcessItem>,
    pub themes: BTreeMap<String, ThemeEntry>,
    pub uncovered: BTreeSet<String>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThemeEntry {
    pub label: String,
    pub members: BTreeSet<String>,
}

pub const CLUSTERING_DOC_VERSION: u32 = 1;

impl ClusteringDocument {
    pub fn new(session_id: &str, strategy: &str, repair: bool, processes: &[ProcessItem], c: &Clustering) -> Self {
        Self {
            version: CLUSTERING_DOC_VERSION,
            session_id: session_id.to_string(),
            strategy: strategy.to_string(),
            repair,
            processes: processes.to_vec(),
            themes: c
                .clusters
                .iter()
                .map(|t| {
                    (
                        t.theme_id.clone(),
                        ThemeEntry {
                            label: t.label.clone(),
                            members: t.members.clone(),
                        },
                    )
                })
                .collect(),
            uncovered: c.uncovered.clone(),
            diagnostics: c.diagnostics.clone(),
        }
    }

    pub fn clustering(&self) -> Clustering {
        Clustering {
            clusters: self
                .themes
                .iter()
                .map(|(id, t)| ThemeCluster {
                    theme_id: id.clone(),
                    label: t.label.clone(),
                    members: t.members.clone(),
                })
                .collect(),
            uncovered: self.uncovered.clone(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("clustering serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.version != CLUSTERING_DOC_VERSION {
            return Err(format!("unsupported clustering version {}", doc.version));
        }
        Ok(doc)
    }
}
