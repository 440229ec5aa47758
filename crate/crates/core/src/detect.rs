//! Stage 1: utterance-level process detection and dimension tagging with
//! K in-context examples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm_gateway::{BackendSpec, CompletionRequest, Gateway, GatewayError, SchemaError, SchemaId};
use crate::transcript::{context_window, working_phase, ContextWindow, Session, Speaker, Utterance};
use crate::util::derive_seed;

/// The nine dimensions, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DimensionLabel {
    Affect,
    Cognition,
    Attention,
    Motivation,
    SenseOfSelf,
    OvertBehavior,
    ContextModerators,
    Sociocultural,
    Biophysiological,
}

impl DimensionLabel {
    pub const ALL: [DimensionLabel; 9] = [
        DimensionLabel::Affect,
        DimensionLabel::Cognition,
        DimensionLabel::Attention,
        DimensionLabel::Motivation,
        DimensionLabel::SenseOfSelf,
        DimensionLabel::OvertBehavior,
        DimensionLabel::ContextModerators,
        DimensionLabel::Sociocultural,
        DimensionLabel::Biophysiological,
    ];

    /// Name used when rendering prompts.
    pub fn display_name(&self) -> &'static str {
        match self {
            DimensionLabel::Affect => "Affect",
            DimensionLabel::Cognition => "Cognition",
            DimensionLabel::Attention => "Attention",
            DimensionLabel::Motivation => "Motivation",
            DimensionLabel::SenseOfSelf => "Sense of Self",
            DimensionLabel::OvertBehavior => "(Overt) Behaviour",
            DimensionLabel::ContextModerators => "Context/Moderators",
            DimensionLabel::Sociocultural => "Sociocultural",
            DimensionLabel::Biophysiological => "Biophysiological",
        }
    }

    pub fn canonical_name(&self) -> &'static str {
        match self {
            DimensionLabel::Affect => "Affect",
            DimensionLabel::Cognition => "Cognition",
            DimensionLabel::Attention => "Attention",
            DimensionLabel::Motivation => "Motivation",
            DimensionLabel::SenseOfSelf => "SenseOfSelf",
            DimensionLabel::OvertBehavior => "OvertBehavior",
            DimensionLabel::ContextModerators => "ContextModerators",
            DimensionLabel::Sociocultural => "Sociocultural",
            DimensionLabel::Biophysiological => "Biophysiological",
        }
    }
}

impl fmt::Display for DimensionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for DimensionLabel {
    type Err = SchemaError;

    /// Accepts canonical and prompt spellings, ignoring case, spacing and
    /// punctuation. Anything else is an unknown label.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        let label = match key.as_str() {
            "affect" => DimensionLabel::Affect,
            "cognition" => DimensionLabel::Cognition,
            "attention" => DimensionLabel::Attention,
            "motivation" => DimensionLabel::Motivation,
            "senseofself" => DimensionLabel::SenseOfSelf,
            "overtbehavior" | "overtbehaviour" | "behavior" | "behaviour" => DimensionLabel::OvertBehavior,
            "contextmoderators" | "context" => DimensionLabel::ContextModerators,
            "sociocultural" | "relationshipsculture" => DimensionLabel::Sociocultural,
            "biophysiological" | "biologyphysiology" => DimensionLabel::Biophysiological,
            _ => return Err(SchemaError::UnknownLabel(s.to_string())),
        };
        Ok(label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessAnnotation {
    #[serde(default)]
    pub utterance_index: usize,
    pub is_process: bool,
    #[serde(default)]
    pub dimensions: BTreeSet<DimensionLabel>,
}

impl ProcessAnnotation {
    pub fn negative(utterance_index: usize) -> Self {
        Self {
            utterance_index,
            is_process: false,
            dimensions: BTreeSet::new(),
        }
    }

    pub fn positive(utterance_index: usize, dims: impl IntoIterator<Item = DimensionLabel>) -> Self {
        Self {
            utterance_index,
            is_process: true,
            dimensions: dims.into_iter().collect(),
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.is_process != self.dimensions.is_empty()
    }
}

/// Line record for annotation files (predictions and gold labels).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub session_id: String,
    pub utterance_index: usize,
    pub is_process: bool,
    #[serde(default)]
    pub dimensions: BTreeSet<DimensionLabel>,
    #[serde(default)]
    pub run_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rater_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AnnotationRecord {
    pub fn from_annotation(session_id: &str, run_id: usize, a: &ProcessAnnotation) -> Self {
        Self {
            session_id: session_id.to_string(),
            utterance_index: a.utterance_index,
            is_process: a.is_process,
            dimensions: a.dimensions.clone(),
            run_id,
            rater_id: None,
            error: None,
        }
    }

    pub fn annotation(&self) -> ProcessAnnotation {
        ProcessAnnotation {
            utterance_index: self.utterance_index,
            is_process: self.is_process,
            dimensions: self.dimensions.clone(),
        }
    }
}

pub fn parse_annotation_records(text: &str) -> Result<Vec<AnnotationRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

pub fn annotation_records_to_jsonl(records: &[AnnotationRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub const ALLOWED_K: [usize; 6] = [0, 1, 5, 10, 50, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub k: usize,
    pub runs: usize,
    pub example_pool_size: usize,
    pub rng_seed: u64,
    pub context_before: usize,
    pub context_after: usize,
    pub lead_min: f64,
    pub tail_min: f64,
    pub parallelism: usize,
    pub max_tokens: u32,
    pub retries: usize,
    /// Classify only patient utterances.
    pub patient_only: bool,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            runs: 1,
            example_pool_size: 200,
            rng_seed: 0,
            context_before: 2,
            context_after: 2,
            lead_min: 15.0,
            tail_min: 5.0,
            parallelism: 4,
            max_tokens: 512,
            retries: crate::llm_gateway::DEFAULT_RETRIES,
            patient_only: true,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !ALLOWED_K.contains(&self.k) {
            return Err(DetectError::Config(format!(
                "k must be one of {ALLOWED_K:?}, got {}",
                self.k
            )));
        }
        if self.k > self.example_pool_size {
            return Err(DetectError::Config(format!(
                "k = {} exceeds example_pool_size = {}",
                self.k, self.example_pool_size
            )));
        }
        if self.runs == 0 {
            return Err(DetectError::Config("runs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleContext {
    #[serde(default)]
    pub before: Vec<String>,
    #[serde(default)]
    pub after: Vec<String>,
}

/// An annotated utterance used for in-context prompting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub utterance: String,
    #[serde(default = "empty_context")]
    pub context: ExampleContext,
    #[serde(flatten)]
    pub gold: ProcessAnnotation,
}

fn empty_context() -> ExampleContext {
    ExampleContext {
        before: Vec::new(),
        after: Vec::new(),
    }
}

fn speaker_line(u: &Utterance) -> String {
    format!("{}: {}", u.speaker, u.text)
}

impl LabeledExample {
    pub fn from_window(window: &ContextWindow, gold: ProcessAnnotation) -> Self {
        Self {
            utterance: window.target.text.clone(),
            context: ExampleContext {
                before: window.before.iter().map(speaker_line).collect(),
                after: window.after.iter().map(speaker_line).collect(),
            },
            gold,
        }
    }
}

pub fn parse_example_pool(text: &str) -> Result<Vec<LabeledExample>, String> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1))?;
        if !ex.gold.is_consistent() {
            return Err(format!("line {}: is_process and dimensions disagree", i + 1));
        }
        out.push(ex);
    }
    Ok(out)
}

/// Builds labeled examples from a session and gold records (rater records
/// for the same utterance are merged with the union rule).
pub fn build_pool(
    session: &Session,
    gold: &[AnnotationRecord],
    before: usize,
    after: usize,
) -> Result<Vec<LabeledExample>, DetectError> {
    let mut merged: BTreeMap<usize, ProcessAnnotation> = BTreeMap::new();
    for r in gold
        .iter()
        .filter(|r| r.session_id.is_empty() || r.session_id == session.session_id)
    {
        let a = r.annotation();
        let next = match merged.remove(&r.utterance_index) {
            Some(prev) => crate::evalkit::resolve_gold(&prev, &a).map_err(|e| DetectError::Config(e.to_string()))?,
            None => a,
        };
        merged.insert(r.utterance_index, next);
    }
    merged
        .into_values()
        .map(|a| {
            let w = context_window(session, a.utterance_index, before, after)?;
            Ok(LabeledExample::from_window(&w, a))
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid detection config: {0}")]
    Config(String),
    #[error("requested {k} examples from a pool of {pool}")]
    PoolTooSmall { k: usize, pool: usize },
    #[error("unknown dimension label '{0}'")]
    UnknownLabel(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Transcript(#[from] crate::transcript::TranscriptError),
}

/// Draws `k` examples balanced between positive and negative `is_process`
/// labels (the odd one goes to the positive side), then shuffles them.
pub fn sample_examples(pool: &[LabeledExample], k: usize, seed: u64) -> Result<Vec<LabeledExample>, DetectError> {
    if k > pool.len() {
        return Err(DetectError::PoolTooSmall { k, pool: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos, neg): (Vec<&LabeledExample>, Vec<&LabeledExample>) = pool.iter().partition(|e| e.gold.is_process);
    let mut want_pos = k.div_ceil(2);
    let mut want_neg = k / 2;
    if want_pos > pos.len() {
        want_neg += want_pos - pos.len();
        want_pos = pos.len();
    }
    if want_neg > neg.len() {
        want_pos += want_neg - neg.len();
        want_neg = neg.len();
    }
    let mut picked: Vec<LabeledExample> = pos
        .choose_multiple(&mut rng, want_pos)
        .chain(neg.choose_multiple(&mut rng, want_neg))
        .map(|e| (*e).clone())
        .collect();
    picked.shuffle(&mut rng);
    Ok(picked)
}

/// Splits labeled data into a prompting pool of `pool_size` examples and the
/// held-out remainder.
pub fn draw_pool(all: &[LabeledExample], pool_size: usize, seed: u64) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = pool_size.min(all.len());
    let mut pool_idx = idx[..cut].to_vec();
    let mut rest_idx = idx[cut..].to_vec();
    pool_idx.sort_unstable();
    rest_idx.sort_unstable();
    (
        pool_idx.into_iter().map(|i| all[i].clone()).collect(),
        rest_idx.into_iter().map(|i| all[i].clone()).collect(),
    )
}

pub const PROCESS_DEFINITION: &str = "A psychological process is a mental or emotional function that reflects how a person perceives, interprets, reacts to, or regulates their internal or external experiences. This includes emotional responses, thoughts, decisions, memories, social interpretations, and personal reflections.";

const DETECTION_TEMPLATE: &str = "\
$definition$
Task: You are a psychological process classifier. Your task is to analyze a dialogue utterance and determine:

1. Whether it reflects a psychological process.
2. If it does, classify it into one or more of the following types of psychological processes:
   - Cognition: How the patient thinks and assigns meaning to events.
   - Sense of Self: How the patient perceives and conceptualizes themselves.
   - (Overt) Behaviour: Observable or repetitive actions the patient takes.
   - Affect: How the patient feels about their situation.
   - Context/Moderators: Situational factors that are static or difficult to change.
   - Attention: How the patient directs or shifts focus during experiences.
   - Biophysiological: Aspects related to sleep, diet, exercise, and chronic health conditions.
   - Motivation: The goals or aims the patient pursues.
   - Sociocultural: The social and cultural relationships and contexts the patient engages with.

Format for the output:
{
  \"utterance\": main utterance to classify,
  \"context\": utterances before and after,
  \"is_process\": true or false,
  \"types\": [list of types if applicable, otherwise empty]
}

Examples:
$examples$
Classify this utterance: $test_instance$
";

/// Line prefix that opens every rendered example block.
pub const EXAMPLE_BLOCK_PREFIX: &str = "Example ";

fn render_example(n: usize, ex: &LabeledExample) -> String {
    let types: Vec<&str> = ex.gold.dimensions.iter().map(|d| d.display_name()).collect();
    let body = json!({
        "utterance": ex.utterance,
        "context": {"before": ex.context.before, "after": ex.context.after},
        "is_process": ex.gold.is_process,
        "types": types,
    });
    format!(
        "{EXAMPLE_BLOCK_PREFIX}{n}:\n{}\n",
        ordered_json(&body, &["utterance", "context", "is_process", "types"])
    )
}

/// Serializes a flat object with a fixed key order.
fn ordered_json(v: &Value, keys: &[&str]) -> String {
    let parts: Vec<String> = keys
        .iter()
        .filter_map(|k| v.get(*k).map(|x| format!("\"{k}\": {x}")))
        .collect();
    format!("{{{}}}", parts.join(", "))
}

pub fn render_test_instance(target: &ContextWindow) -> String {
    let body = json!({
        "utterance": target.target.text,
        "context": {
            "before": target.before.iter().map(speaker_line).collect::<Vec<_>>(),
            "after": target.after.iter().map(speaker_line).collect::<Vec<_>>(),
        },
    });
    ordered_json(&body, &["utterance", "context"])
}

pub fn build_detection_prompt(examples: &[LabeledExample], target: &ContextWindow) -> String {
    let rendered: String = examples
        .iter()
        .enumerate()
        .map(|(i, e)| render_example(i + 1, e))
        .collect();
    DETECTION_TEMPLATE
        .replace("$definition$", PROCESS_DEFINITION)
        .replace("$examples$", &rendered)
        .replace("$test_instance$", &render_test_instance(target))
}

/// Number of example blocks in a rendered detection prompt.
pub fn count_example_blocks(prompt: &str) -> usize {
    prompt
        .lines()
        .filter(|l| {
            l.strip_prefix(EXAMPLE_BLOCK_PREFIX)
                .and_then(|rest| rest.strip_suffix(':'))
                .is_some_and(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()))
        })
        .count()
}

/// Converts a validated detection object into an annotation.
pub fn parse_detection(value: &Value, utterance_index: usize) -> Result<ProcessAnnotation, SchemaError> {
    crate::schemas::validate_detection(value)?;
    let is_process = value["is_process"].as_bool().unwrap_or(false);
    let dims = value["types"]
        .as_array()
        .map(|a| {
            a.iter()
                .filter_map(Value::as_str)
                .map(str::parse)
                .collect::<Result<BTreeSet<DimensionLabel>, _>>()
        })
        .transpose()?
        .unwrap_or_default();
    Ok(ProcessAnnotation {
        utterance_index,
        is_process,
        dimensions: dims,
    })
}

/// Per-utterance failure, kept alongside the degraded negative annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFailure {
    pub run_id: usize,
    pub utterance_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub session_id: String,
    /// One list per run, ordered by utterance index.
    pub runs: Vec<Vec<AnnotationRecord>>,
    pub failures: Vec<DetectionFailure>,
    pub short_session: bool,
}

impl DetectionOutput {
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.runs.iter().flatten().cloned().collect()
    }
}

pub struct Detector<'a> {
    gateway: &'a Gateway,
    backend: BackendSpec,
    pool: Vec<LabeledExample>,
    cfg: DetectionConfig,
}

impl<'a> Detector<'a> {
    pub fn new(
        gateway: &'a Gateway,
        backend: BackendSpec,
        pool: Vec<LabeledExample>,
        cfg: DetectionConfig,
    ) -> Result<Self, DetectError> {
        cfg.validate()?;
        if cfg.k > pool.len() {
            return Err(DetectError::PoolTooSmall {
                k: cfg.k,
                pool: pool.len(),
            });
        }
        Ok(Self {
            gateway,
            backend,
            pool,
            cfg,
        })
    }

    pub fn config(&self) -> &DetectionConfig {
        &self.cfg
    }

    /// Examples for one (run, utterance): run `r` uses base seed `seed + r`,
    /// mixed with the utterance index so every utterance gets its own draw.
    pub fn examples_for(&self, run_id: usize, utterance_index: usize) -> Vec<LabeledExample> {
        let run_seed = self.cfg.rng_seed.wrapping_add(run_id as u64);
        let seed = derive_seed(&[&run_seed.to_le_bytes(), &(utterance_index as u64).to_le_bytes()]);
        sample_examples(&self.pool, self.cfg.k, seed).expect("k checked against pool")
    }

    pub fn detect_one(&self, window: &ContextWindow, run_id: usize) -> Result<ProcessAnnotation, DetectError> {
        let examples = self.examples_for(run_id, window.target.index);
        let prompt = build_detection_prompt(&examples, window);
        let req = CompletionRequest::new(self.backend.clone(), prompt, SchemaId::Detection)
            .with_max_tokens(self.cfg.max_tokens);
        let resp = self
            .gateway
            .complete_structured(&req, self.cfg.retries)
            .map_err(|e| match e {
                GatewayError::RetriesExhausted {
                    last_error: SchemaError::UnknownLabel(l),
                    ..
                } => DetectError::UnknownLabel(l),
                other => DetectError::Gateway(other),
            })?;
        parse_detection(&resp.parsed, window.target.index).map_err(|e| match e {
            SchemaError::UnknownLabel(l) => DetectError::UnknownLabel(l),
            other => DetectError::Gateway(GatewayError::RetriesExhausted {
                attempts: vec![resp.raw_text.clone()],
                last_error: other,
            }),
        })
    }

    /// Annotates the working phase of a session once per configured run.
    /// A failing utterance becomes a negative record carrying an error marker.
    pub fn detect_session(&self, session: &Session) -> Result<DetectionOutput, DetectError> {
        let phase = working_phase(session, self.cfg.lead_min, self.cfg.tail_min);
        let targets: Vec<usize> = phase
            .utterances
            .iter()
            .filter(|u| !self.cfg.patient_only || u.speaker == Speaker::Patient)
            .map(|u| u.index)
            .collect();
        let windows = targets
            .iter()
            .map(|&i| context_window(session, i, self.cfg.context_before, self.cfg.context_after))
            .collect::<Result<Vec<_>, _>>()?;
        let jobs: Vec<(usize, &ContextWindow)> = (0..self.cfg.runs)
            .flat_map(|r| windows.iter().map(move |w| (r, w)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.parallelism.max(1))
            .build()
            .map_err(|e| DetectError::Config(e.to_string()))?;
        let results: Vec<(usize, usize, Result<ProcessAnnotation, DetectError>)> = pool.install(|| {
            jobs.par_iter()
                .map(|&(r, w)| (r, w.target.index, self.detect_one(w, r)))
                .collect()
        });

        let mut runs = vec![Vec::with_capacity(windows.len()); self.cfg.runs];
        let mut failures = Vec::new();
        for (run_id, index, res) in results {
            let record = match res {
                Ok(a) => AnnotationRecord::from_annotation(&session.session_id, run_id, &a),
                Err(e) => {
                    tracing::warn!(run_id, index, error = %e, "detection failed; recording negative");
                    failures.push(DetectionFailure {
                        run_id,
                        utterance_index: index,
                        message: e.to_string(),
                    });
                    let mut r = AnnotationRecord::from_annotation(
                        &session.session_id,
                        run_id,
                        &ProcessAnnotation::negative(index),
                    );
                    r.error = Some(e.to_string());
                    r
                }
            };
            runs[run_id].push(record);
        }
        for r in &mut runs {
            r.sort_by_key(|a| a.utterance_index);
        }
        Ok(DetectionOutput {
            session_id: session.session_id.clone(),
            runs,
            failures,
            short_session: phase.short_session,
        })
    }
}

/// Optional cross-run aggregation: an utterance is a process when more than
/// half of the runs say so; a label is kept when more than half of the runs
/// assign it. If that leaves a positive without labels, the most frequent
/// labels across positive runs are kept.
pub fn majority_across_runs(runs: &[Vec<AnnotationRecord>]) -> Vec<AnnotationRecord> {
    let mut by_index: BTreeMap<usize, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in runs.iter().flatten() {
        by_index.entry(r.utterance_index).or_default().push(r);
    }
    by_index
        .into_iter()
        .map(|(index, recs)| {
            let n = recs.len();
            let positives = recs.iter().filter(|r| r.is_process).count();
            let is_process = positives * 2 > n;
            let mut counts: BTreeMap<DimensionLabel, usize> = BTreeMap::new();
            for r in &recs {
                for d in &r.dimensions {
                    *counts.entry(*d).or_default() += 1;
                }
            }
            let mut dims: BTreeSet<DimensionLabel> = if is_process {
                counts.iter().filter(|(_, c)| **c * 2 > n).map(|(d, _)| *d).collect()
            } else {
                BTreeSet::new()
            };
            if is_process && dims.is_empty() {
                let top = counts.values().copied().max().unwrap_or(0);
                dims = counts.iter().filter(|(_, c)| **c == top).map(|(d, _)| *d).collect();
            }
            AnnotationRecord {
                session_id: recs[0].session_id.clone(),
                utterance_index: index,
                is_process: is_process && !dims.is_empty(),
                dimensions: dims,
                run_id: 0,
                rater_id: None,
                error: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::Speaker;

    fn example(i: usize, positive: bool) -> LabeledExample {
        LabeledExample {
            utterance: format!("utterance {i}"),
            context: empty_context(),
            gold: if positive {
                ProcessAnnotation::positive(i, [DimensionLabel::Affect])
            } else {
                ProcessAnnotation::negative(i)
            },
        }
    }

    fn pool(pos: usize, neg: usize) -> Vec<LabeledExample> {
        (0..pos)
            .map(|i| example(i, true))
            .chain((pos..pos + neg).map(|i| example(i, false)))
            .collect()
    }

    fn window(text: &str) -> ContextWindow {
        let u = |i, s, t: &str| Utterance {
            session_id: "s".into(),
            index: i,
            speaker: s,
            text: t.into(),
            start_s: None,
            end_s: None,
            patient_id: None,
        };
        ContextWindow {
            target: u(2, Speaker::Patient, text),
            before: vec![u(0, Speaker::Patient, "Hi."), u(1, Speaker::Therapist, "Go on.")],
            after: vec![u(3, Speaker::Therapist, "Mm-hmm.")],
        }
    }

    #[test]
    fn label_parsing_accepts_prompt_spellings_only() {
        assert_eq!(
            "Sense of Self".parse::<DimensionLabel>().unwrap(),
            DimensionLabel::SenseOfSelf
        );
        assert_eq!(
            "(Overt) Behaviour".parse::<DimensionLabel>().unwrap(),
            DimensionLabel::OvertBehavior
        );
        assert_eq!(
            "context/moderators".parse::<DimensionLabel>().unwrap(),
            DimensionLabel::ContextModerators
        );
        for d in DimensionLabel::ALL {
            assert_eq!(d.display_name().parse::<DimensionLabel>().unwrap(), d);
            assert_eq!(d.canonical_name().parse::<DimensionLabel>().unwrap(), d);
        }
        assert_eq!(
            "Emotion".parse::<DimensionLabel>(),
            Err(SchemaError::UnknownLabel("Emotion".into()))
        );
    }

    #[test]
    fn canonical_order() {
        let mut v = DimensionLabel::ALL.to_vec();
        v.reverse();
        v.sort();
        assert_eq!(v, DimensionLabel::ALL.to_vec());
        assert!(DimensionLabel::Motivation < DimensionLabel::SenseOfSelf);
    }

    #[test]
    fn sample_zero_and_balance() {
        let p = pool(50, 50);
        assert!(sample_examples(&p, 0, 1).unwrap().is_empty());
        let s = sample_examples(&p, 10, 1).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.iter().filter(|e| e.gold.is_process).count(), 5);
        assert_eq!(sample_examples(&p, 10, 1).unwrap(), s);
        assert_ne!(sample_examples(&p, 10, 2).unwrap(), s);
    }

    #[test]
    fn sample_fills_from_other_class_when_short() {
        let p = pool(2, 20);
        let s = sample_examples(&p, 10, 3).unwrap();
        assert_eq!(s.iter().filter(|e| e.gold.is_process).count(), 2);
        assert!(matches!(
            sample_examples(&p, 23, 3),
            Err(DetectError::PoolTooSmall { k: 23, pool: 22 })
        ));
    }

    #[test]
    fn prompt_counts_blocks() {
        let p = pool(3, 3);
        let zero = build_detection_prompt(&[], &window("x"));
        assert_eq!(count_example_blocks(&zero), 0);
        assert!(zero.contains("Examples:\n\nClassify this utterance: "));
        let five = build_detection_prompt(&p[..5], &window("x"));
        assert_eq!(count_example_blocks(&five), 5);
        assert!(five.contains("You are a psychological process classifier"));
    }

    #[test]
    fn test_instance_escapes_text() {
        let s = render_test_instance(&window("she said \"no\"\nthen left"));
        assert!(s.starts_with(r#"{"utterance": "she said \"no\"\nthen left", "context": "#));
        assert!(s.contains(r#""before":["Patient: Hi.","Therapist: Go on."]"#));
    }

    #[test]
    fn parse_detection_rejects_inconsistency() {
        let ok = json!({"is_process": true, "types": ["Affect", "Sense of Self"]});
        let a = parse_detection(&ok, 4).unwrap();
        assert_eq!(a.utterance_index, 4);
        assert_eq!(
            a.dimensions,
            [DimensionLabel::Affect, DimensionLabel::SenseOfSelf]
                .into_iter()
                .collect()
        );
        assert!(parse_detection(&json!({"is_process": true, "types": []}), 0).is_err());
        assert!(parse_detection(&json!({"is_process": false, "types": ["Affect"]}), 0).is_err());
        assert_eq!(
            parse_detection(&json!({"is_process": true, "types": ["Mood"]}), 0),
            Err(SchemaError::UnknownLabel("Mood".into()))
        );
    }

    #[test]
    fn config_validation() {
        let mut c = DetectionConfig::default();
        assert!(c.validate().is_ok());
        c.k = 3;
        assert!(c.validate().is_err());
        c.k = 100;
        c.example_pool_size = 50;
        assert!(c.validate().is_err());
        c = DetectionConfig {
            runs: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn majority_across_three_runs() {
        let rec = |run, is_p, dims: &[DimensionLabel]| AnnotationRecord {
            session_id: "s".into(),
            utterance_index: 7,
            is_process: is_p,
            dimensions: dims.iter().copied().collect(),
            run_id: run,
            rater_id: None,
            error: None,
        };
        use DimensionLabel::*;
        let runs = vec![
            vec![rec(0, true, &[Affect, Cognition])],
            vec![rec(1, true, &[Affect])],
            vec![rec(2, false, &[])],
        ];
        let m = majority_across_runs(&runs);
        assert_eq!(m.len(), 1);
        assert!(m[0].is_process);
        assert_eq!(m[0].dimensions, [Affect].into_iter().collect());
    }

    #[test]
    fn draw_pool_partitions() {
        let all = pool(10, 10);
        let (p, rest) = draw_pool(&all, 8, 5);
        assert_eq!(p.len(), 8);
        assert_eq!(rest.len(), 12);
        let mut ids: Vec<_> = p.iter().chain(&rest).map(|e| e.gold.utterance_index).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..20).collect::<Vec<_>>());
    }
}
