//! Dialogue transcripts: loading, validation, working-phase segmentation,
//! context windows, de-identification checks and corpus statistics.
//!
//! Transcripts are line-delimited JSON, one utterance per line:
//!
//! ```text
//! {"session_id":"s1","index":0,"speaker":"therapist","text":"Hi.","start_s":0.0,"end_s":2.5}
//! ```
//!
//! `start_s`/`end_s` are optional. An optional `patient_id` groups sessions
//! for per-patient statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Range};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of the transcript line schema.
pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("ordering error on line {line}: {message}")]
    Ordering { line: usize, message: String },
    #[error("utterance index {index} out of range for session of {len} utterances")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid pattern '{name}': {message}")]
    Pattern { name: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Therapist,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::Patient => f.write_str("Patient"),
            Speaker::Therapist => f.write_str("Therapist"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub session_id: String,
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
}

impl Utterance {
    /// Number of whitespace-delimited tokens.
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }

    pub fn duration_s(&self) -> f64 {
        match (self.start_s, self.end_s) {
            (Some(s), Some(e)) => e - s,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub utterances: Vec<Utterance>,
    pub total_duration_s: Option<f64>,
}

impl Session {
    /// Builds a session, checking every invariant that `load_session` checks.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self, TranscriptError> {
        validate_utterances(&utterances)?;
        let session_id = utterances.first().map(|u| u.session_id.clone()).unwrap_or_default();
        let total_duration_s = utterances.last().and_then(|u| u.end_s.or(u.start_s));
        Ok(Self {
            session_id,
            utterances,
            total_duration_s,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn patient_id(&self) -> &str {
        self.utterances
            .iter()
            .find_map(|u| u.patient_id.as_deref())
            .unwrap_or(&self.session_id)
    }

    /// Canonical line-delimited form.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(u).expect("utterance serializes"));
            out.push('\n');
        }
        out
    }

    /// Renders utterances as `Speaker: text` lines.
    pub fn render_text(utterances: &[Utterance]) -> String {
        utterances
            .iter()
            .map(|u| format!("{}: {}", u.speaker, u.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn validate_utterances(utterances: &[Utterance]) -> Result<(), TranscriptError> {
    let mut prev_start: Option<f64> = None;
    for (pos, u) in utterances.iter().enumerate() {
        let line = pos + 1;
        if u.text.trim().is_empty() {
            return Err(TranscriptError::Parse {
                line,
                message: "empty utterance text".into(),
            });
        }
        if u.session_id != utterances[0].session_id {
            return Err(TranscriptError::Parse {
                line,
                message: format!(
                    "session_id '{}' differs from '{}'",
                    u.session_id, utterances[0].session_id
                ),
            });
        }
        if u.index != pos {
            return Err(TranscriptError::Ordering {
                line,
                message: format!("expected index {pos}, found {}", u.index),
            });
        }
        for t in [u.start_s, u.end_s].into_iter().flatten() {
            if !t.is_finite() || t < 0.0 {
                return Err(TranscriptError::Parse {
                    line,
                    message: format!("invalid timestamp {t}"),
                });
            }
        }
        if let (Some(s), Some(e)) = (u.start_s, u.end_s) {
            if s > e {
                return Err(TranscriptError::Ordering {
                    line,
                    message: format!("start_s {s} after end_s {e}"),
                });
            }
        }
        if let Some(s) = u.start_s {
            if let Some(p) = prev_start {
                if s < p {
                    return Err(TranscriptError::Ordering {
                        line,
                        message: format!("start_s {s} precedes previous start {p}"),
                    });
                }
            }
            prev_start = Some(s);
        }
    }
    Ok(())
}

pub fn parse_session(input: &str) -> Result<Session, TranscriptError> {
    let mut utterances = Vec::new();
    for (i, raw) in input.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(raw).map_err(|e| TranscriptError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        utterances.push(u);
    }
    Session::new(utterances)
}

pub fn load_session(path: impl AsRef<Path>) -> Result<Session, TranscriptError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TranscriptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_session(&text)
}

pub fn save_session(session: &Session, path: impl AsRef<Path>) -> Result<(), TranscriptError> {
    let path = path.as_ref();
    std::fs::write(path, session.to_jsonl()).map_err(|source| TranscriptError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Utterances selected as the working phase of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingPhase {
    pub range: Range<usize>,
    pub utterances: Vec<Utterance>,
    /// Set when the session is shorter than `lead + tail` and the whole
    /// session was returned.
    pub short_session: bool,
}

/// Selects the `lead_min` minutes preceding the final `tail_min` minutes.
///
/// With timestamps, an utterance belongs to the window iff its `start_s`
/// lies in `[end - (lead + tail) * 60, end - tail * 60)`. Without them the
/// same fraction of a nominal 60-minute session is taken over utterance
/// positions.
pub fn working_phase(session: &Session, lead_min: f64, tail_min: f64) -> WorkingPhase {
    let n = session.len();
    let whole = |short| WorkingPhase {
        range: 0..n,
        utterances: session.utterances.clone(),
        short_session: short,
    };
    if n == 0 {
        return whole(false);
    }
    let timed = session.utterances.iter().all(|u| u.start_s.is_some());
    let range = if timed {
        let first = session.utterances[0].start_s.unwrap_or(0.0);
        let last = &session.utterances[n - 1];
        let end = last.end_s.or(last.start_s).unwrap_or(0.0);
        if end - first < (lead_min + tail_min) * 60.0 {
            return whole(true);
        }
        let lo = end - (lead_min + tail_min) * 60.0;
        let hi = end - tail_min * 60.0;
        let start = session
            .utterances
            .iter()
            .position(|u| u.start_s.unwrap_or(0.0) >= lo)
            .unwrap_or(n);
        let stop = session
            .utterances
            .iter()
            .position(|u| u.start_s.unwrap_or(0.0) >= hi)
            .unwrap_or(n);
        start..stop.max(start)
    } else {
        let nominal = 60.0;
        if lead_min + tail_min > nominal {
            return whole(true);
        }
        // index i is kept iff i/n lies in [1 - (lead+tail)/60, 1 - tail/60)
        let nf = n as f64;
        let lo_num = nf * (nominal - lead_min - tail_min);
        let hi_num = nf * (nominal - tail_min);
        let start = (0..n).find(|&i| i as f64 * nominal >= lo_num).unwrap_or(n);
        let stop = (0..n).find(|&i| i as f64 * nominal >= hi_num).unwrap_or(n);
        start..stop.max(start)
    };
    WorkingPhase {
        utterances: session.utterances[range.clone()].to_vec(),
        range,
        short_session: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub target: Utterance,
    pub before: Vec<Utterance>,
    pub after: Vec<Utterance>,
}

pub fn context_window(
    session: &Session,
    index: usize,
    before: usize,
    after: usize,
) -> Result<ContextWindow, TranscriptError> {
    let n = session.len();
    if index >= n {
        return Err(TranscriptError::IndexOutOfRange { index, len: n });
    }
    let lo = index.saturating_sub(before);
    let hi = (index + 1 + after).min(n);
    Ok(ContextWindow {
        target: session.utterances[index].clone(),
        before: session.utterances[lo..index].to_vec(),
        after: session.utterances[index + 1..hi].to_vec(),
    })
}

/// A named regular expression used to flag personally identifying text.
#[derive(Debug, Clone)]
pub struct PiiPattern {
    pub name: String,
    pub regex: Regex,
}

#[derive(Debug, Clone)]
pub struct PiiPatterns {
    pub patterns: Vec<PiiPattern>,
}

impl PiiPatterns {
    /// Builds a pattern list from `(name, regex)` pairs.
    pub fn from_pairs<I, S, T>(pairs: I) -> Result<Self, TranscriptError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut patterns = Vec::new();
        for (name, re) in pairs {
            let name = name.into();
            let regex = Regex::new(re.as_ref()).map_err(|e| TranscriptError::Pattern {
                name: name.clone(),
                message: e.to_string(),
            })?;
            patterns.push(PiiPattern { name, regex });
        }
        Ok(Self { patterns })
    }
}

/// Default patterns: e-mail addresses, phone numbers and runs of two or more
/// capitalized words (name candidates).
pub const DEFAULT_PII_PATTERNS: [(&str, &str); 3] = [
    ("email", r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}"),
    (
        "phone",
        r"(?:\+?\d{1,2}[-. ]?)?(?:\(\d{3}\)\s?|\b\d{3}[-. ])?\b\d{3}[-. ]\d{4}\b",
    ),
    ("name", r"\b[A-Z][a-z]+(?:\s+[A-Z][a-z]+)+\b"),
];

impl Default for PiiPatterns {
    fn default() -> Self {
        Self::from_pairs(DEFAULT_PII_PATTERNS).expect("default patterns compile")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiViolation {
    pub utterance_index: usize,
    pub pattern: String,
    pub span: String,
    pub start: usize,
    pub end: usize,
}

/// Reports spans matching a PII pattern outside bracketed uppercase
/// placeholders such as `[HUSBAND]`.
pub fn check_deidentified(session: &Session, patterns: &PiiPatterns) -> Vec<PiiViolation> {
    let placeholder = Regex::new(r"\[[A-Z0-9_ ]+\]").expect("placeholder regex");
    let mut out = Vec::new();
    for u in &session.utterances {
        let masked: Vec<Range<usize>> = placeholder.find_iter(&u.text).map(|m| m.range()).collect();
        let inside = |r: &Range<usize>| masked.iter().any(|m| r.start < m.end && m.start < r.end);
        // one violation per distinct span; earlier patterns win overlaps
        let mut taken: Vec<Range<usize>> = Vec::new();
        for p in &patterns.patterns {
            for m in p.regex.find_iter(&u.text) {
                let r = m.range();
                if inside(&r) || taken.iter().any(|t| r.start < t.end && t.start < r.end) {
                    continue;
                }
                taken.push(r.clone());
                out.push(PiiViolation {
                    utterance_index: u.index,
                    pattern: p.name.clone(),
                    span: m.as_str().to_string(),
                    start: r.start,
                    end: r.end,
                });
            }
        }
    }
    out.sort_by_key(|a| (a.utterance_index, a.start));
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub words: usize,
    pub utterances: usize,
    pub duration_s: f64,
}

impl Add for SpeakerStats {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            words: self.words + o.words,
            utterances: self.utterances + o.utterances,
            duration_s: self.duration_s + o.duration_s,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSplit {
    pub patient: SpeakerStats,
    pub therapist: SpeakerStats,
}

impl SpeakerSplit {
    fn record(&mut self, u: &Utterance) {
        let s = match u.speaker {
            Speaker::Patient => &mut self.patient,
            Speaker::Therapist => &mut self.therapist,
        };
        s.words += u.word_count();
        s.utterances += 1;
        s.duration_s += u.duration_s();
    }
}

impl AddAssign for SpeakerSplit {
    fn add_assign(&mut self, o: Self) {
        self.patient = self.patient + o.patient;
        self.therapist = self.therapist + o.therapist;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub per_session: BTreeMap<String, SpeakerSplit>,
    pub per_patient: BTreeMap<String, SpeakerSplit>,
    pub totals: SpeakerSplit,
}

impl Add for CorpusStats {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        for (k, v) in o.per_session {
            *self.per_session.entry(k).or_default() += v;
        }
        for (k, v) in o.per_patient {
            *self.per_patient.entry(k).or_default() += v;
        }
        self.totals += o.totals;
        self
    }
}

impl CorpusStats {
    /// Tab-separated table: one row per (scope, key, speaker).
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scope\tkey\tspeaker\twords\tutterances\tduration_s\n");
        let mut row = |scope: &str, key: &str, split: &SpeakerSplit| {
            for (name, s) in [("patient", &split.patient), ("therapist", &split.therapist)] {
                out.push_str(&format!(
                    "{scope}\t{key}\t{name}\t{}\t{}\t{:.2}\n",
                    s.words, s.utterances, s.duration_s
                ));
            }
        };
        for (k, v) in &self.per_session {
            row("session", k, v);
        }
        for (k, v) in &self.per_patient {
            row("patient", k, v);
        }
        row("total", "all", &self.totals);
        out
    }
}

pub fn corpus_stats(sessions: &[Session]) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for s in sessions {
        let mut split = SpeakerSplit::default();
        for u in &s.utterances {
            split.record(u);
        }
        *stats.per_session.entry(s.session_id.clone()).or_default() += split;
        *stats.per_patient.entry(s.patient_id().to_string()).or_default() += split;
        stats.totals += split;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(i: usize, speaker: Speaker, text: &str, t: Option<(f64, f64)>) -> Utterance {
        Utterance {
            session_id: "s".into(),
            index: i,
            speaker,
            text: text.into(),
            start_s: t.map(|x| x.0),
            end_s: t.map(|x| x.1),
            patient_id: None,
        }
    }

    fn plain(n: usize) -> Session {
        Session::new(
            (0..n)
                .map(|i| utt(i, Speaker::Patient, &format!("u{i}"), None))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_three_lines() {
        let input = r#"{"session_id":"s","index":0,"speaker":"therapist","text":"Hi."}
{"session_id":"s","index":1,"speaker":"patient","text":"Hello there."}
{"session_id":"s","index":2,"speaker":"therapist","text":"How are you?"}
"#;
        let s = parse_session(input).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.utterances.iter().map(|u| u.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn duplicate_index_is_ordering_error() {
        let input = r#"{"session_id":"s","index":0,"speaker":"therapist","text":"Hi."}
{"session_id":"s","index":0,"speaker":"patient","text":"Hello."}
"#;
        assert!(matches!(
            parse_session(input),
            Err(TranscriptError::Ordering { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_and_invalid_records() {
        assert!(matches!(
            parse_session("{not json}"),
            Err(TranscriptError::Parse { line: 1, .. })
        ));
        let bad_speaker = r#"{"session_id":"s","index":0,"speaker":"nurse","text":"Hi."}"#;
        assert!(matches!(parse_session(bad_speaker), Err(TranscriptError::Parse { .. })));
        let empty = r#"{"session_id":"s","index":0,"speaker":"patient","text":"   "}"#;
        assert!(matches!(parse_session(empty), Err(TranscriptError::Parse { .. })));
        let backwards = r#"{"session_id":"s","index":0,"speaker":"patient","text":"a","start_s":5.0,"end_s":4.0}"#;
        assert!(matches!(
            parse_session(backwards),
            Err(TranscriptError::Ordering { .. })
        ));
        let clock = r#"{"session_id":"s","index":0,"speaker":"patient","text":"a","start_s":5.0,"end_s":6.0}
{"session_id":"s","index":1,"speaker":"patient","text":"b","start_s":4.0,"end_s":6.5}"#;
        assert!(matches!(
            parse_session(clock),
            Err(TranscriptError::Ordering { line: 2, .. })
        ));
    }

    #[test]
    fn context_window_boundaries() {
        let s = plain(5);
        let w = context_window(&s, 0, 2, 2).unwrap();
        assert!(w.before.is_empty());
        assert_eq!(w.after.iter().map(|u| u.index).collect::<Vec<_>>(), vec![1, 2]);
        let w = context_window(&s, 2, 2, 2).unwrap();
        assert_eq!(w.before.iter().map(|u| u.index).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(w.after.iter().map(|u| u.index).collect::<Vec<_>>(), vec![3, 4]);
        let w = context_window(&s, 4, 2, 2).unwrap();
        assert_eq!(w.before.iter().map(|u| u.index).collect::<Vec<_>>(), vec![2, 3]);
        assert!(w.after.is_empty());
        assert!(matches!(
            context_window(&s, 5, 2, 2),
            Err(TranscriptError::IndexOutOfRange { index: 5, len: 5 })
        ));
    }

    #[test]
    fn working_phase_sixty_minutes() {
        // one utterance per minute, starting at minute i
        let s = Session::new(
            (0..60)
                .map(|i| {
                    let t = i as f64 * 60.0;
                    utt(i, Speaker::Patient, "x", Some((t, t + 60.0)))
                })
                .collect(),
        )
        .unwrap();
        let wp = working_phase(&s, 15.0, 5.0);
        assert!(!wp.short_session);
        assert_eq!(wp.range, 40..55);
    }

    #[test]
    fn working_phase_short_session_returns_all() {
        let s = Session::new(
            (0..10)
                .map(|i| {
                    let t = i as f64 * 60.0;
                    utt(i, Speaker::Patient, "x", Some((t, t + 60.0)))
                })
                .collect(),
        )
        .unwrap();
        let wp = working_phase(&s, 15.0, 5.0);
        assert!(wp.short_session);
        assert_eq!(wp.range, 0..10);
    }

    #[test]
    fn working_phase_without_timestamps_is_proportional() {
        // [1 - 20/60, 1 - 5/60) of 60 positions = [40, 55)
        assert_eq!(working_phase(&plain(60), 15.0, 5.0).range, 40..55);
        // 12 positions: i/12 in [2/3, 11/12) -> 8..11
        assert_eq!(working_phase(&plain(12), 15.0, 5.0).range, 8..11);
        assert!(working_phase(&plain(12), 50.0, 15.0).short_session);
    }

    #[test]
    fn pii_placeholder_and_phone() {
        let s = Session::new(vec![
            utt(0, Speaker::Patient, "I told [HUSBAND] about it", None),
            utt(1, Speaker::Patient, "call me at 555-0100", None),
        ])
        .unwrap();
        let v = check_deidentified(&s, &PiiPatterns::default());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].utterance_index, 1);
        assert_eq!(v[0].pattern, "phone");
        assert_eq!(v[0].span, "555-0100");
    }

    #[test]
    fn pii_multiword_placeholder_and_names() {
        let s = Session::new(vec![
            utt(0, Speaker::Patient, "Then [BEST FRIEND] called.", None),
            utt(
                1,
                Speaker::Patient,
                "I met Jane Doe downtown, mail jd@example.org",
                None,
            ),
        ])
        .unwrap();
        let v = check_deidentified(&s, &PiiPatterns::default());
        let kinds: Vec<_> = v.iter().map(|x| x.pattern.as_str()).collect();
        assert_eq!(kinds, vec!["name", "email"]);
    }

    #[test]
    fn custom_patterns_and_bad_regex() {
        let p = PiiPatterns::from_pairs([("ssn", r"\b\d{3}-\d{2}-\d{4}\b")]).unwrap();
        let s = Session::new(vec![utt(0, Speaker::Patient, "it is 123-45-6789", None)]).unwrap();
        assert_eq!(check_deidentified(&s, &p).len(), 1);
        assert!(PiiPatterns::from_pairs([("bad", "(")]).is_err());
    }

    #[test]
    fn corpus_stats_basics() {
        assert_eq!(corpus_stats(&[]), CorpusStats::default());
        let s = Session::new(vec![utt(0, Speaker::Patient, "a b c", Some((1.0, 3.5)))]).unwrap();
        let st = corpus_stats(&[s]);
        assert_eq!(st.totals.patient.words, 3);
        assert_eq!(st.totals.patient.utterances, 1);
        assert_eq!(st.totals.patient.duration_s, 2.5);
        assert_eq!(st.totals.therapist, SpeakerStats::default());
        assert!(st.to_tsv().contains("total\tall\tpatient\t3\t1\t2.50"));
    }
}
