//! Detection metrics, rater agreement, expert-rating scores and preference
//! tallies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{AnnotationRecord, DimensionLabel, ProcessAnnotation};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("annotations refer to different utterances ({0} and {1})")]
    IndexMismatch(usize, usize),
    #[error("inputs differ in length ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("input is empty")]
    Empty,
    #[error("value {0} is outside its allowed range")]
    OutOfRange(f64),
    #[error("missing metric '{0}'")]
    MissingMetric(Metric),
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
    #[error("unknown question '{0}'")]
    UnknownQuestion(String),
    #[error("choice '{choice}' was not offered for item '{item_id}'")]
    UnknownChoice { item_id: String, choice: String },
    #[error("record {record}: {message}")]
    Parse { record: usize, message: String },
}

/// Presence is the OR of both raters and dimensions are the union.
pub fn resolve_gold(a: &ProcessAnnotation, b: &ProcessAnnotation) -> Result<ProcessAnnotation, EvalError> {
    if a.utterance_index != b.utterance_index {
        return Err(EvalError::IndexMismatch(a.utterance_index, b.utterance_index));
    }
    Ok(ProcessAnnotation {
        utterance_index: a.utterance_index,
        is_process: a.is_process || b.is_process,
        dimensions: a.dimensions.union(&b.dimensions).copied().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    /// Ratios are 0 when their denominator is 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

fn same_len<A, B>(a: &[A], b: &[B]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

pub fn binary_prf(preds: &[bool], golds: &[bool]) -> Result<Prf, EvalError> {
    same_len(preds, golds)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Micro-averaged over (item, label) pairs.
pub fn multilabel_prf<T: Ord>(preds: &[BTreeSet<T>], golds: &[BTreeSet<T>]) -> Result<Prf, EvalError> {
    same_len(preds, golds)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

pub fn observed_agreement<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, EvalError> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Cohen's kappa. When chance agreement is 1 (both raters used one and the
/// same category throughout) the result is 1.0.
pub fn cohen_kappa<T: Eq + Hash + Ord>(a: &[T], b: &[T]) -> Result<f64, EvalError> {
    let p_o = observed_agreement(a, b)?;
    let n = a.len() as f64;
    let mut counts: BTreeMap<&T, (usize, usize)> = BTreeMap::new();
    for x in a {
        counts.entry(x).or_default().0 += 1;
    }
    for y in b {
        counts.entry(y).or_default().1 += 1;
    }
    let p_e: f64 = counts.values().map(|&(ca, cb)| (ca as f64 / n) * (cb as f64 / n)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Kappa of per-item label membership, for every label.
pub fn per_label_kappa(
    a: &[BTreeSet<DimensionLabel>],
    b: &[BTreeSet<DimensionLabel>],
) -> Result<BTreeMap<DimensionLabel, f64>, EvalError> {
    same_len(a, b)?;
    DimensionLabel::ALL
        .iter()
        .map(|&d| {
            let xa: Vec<bool> = a.iter().map(|s| s.contains(&d)).collect();
            let xb: Vec<bool> = b.iter().map(|s| s.contains(&d)).collect();
            Ok((d, cohen_kappa(&xa, &xb)?))
        })
        .collect()
}

/// Observed agreement per label, alongside [`per_label_kappa`].
pub fn per_label_agreement(
    a: &[BTreeSet<DimensionLabel>],
    b: &[BTreeSet<DimensionLabel>],
) -> Result<BTreeMap<DimensionLabel, f64>, EvalError> {
    same_len(a, b)?;
    DimensionLabel::ALL
        .iter()
        .map(|&d| {
            let xa: Vec<bool> = a.iter().map(|s| s.contains(&d)).collect();
            let xb: Vec<bool> = b.iter().map(|s| s.contains(&d)).collect();
            Ok((d, observed_agreement(&xa, &xb)?))
        })
        .collect()
}

/// Maps a completeness fraction onto the 1..3 rating scale as `1 + 2f`.
pub fn completeness_score(fraction: f64) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(EvalError::OutOfRange(fraction));
    }
    Ok(1.0 + 2.0 * fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ClinicalRelevance,
    Novelty,
    Usefulness,
    Specificity,
    Coverage,
    Completeness,
    Intrusiveness,
    Redundancy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Insightfulness,
    Trustworthiness,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::ClinicalRelevance,
        Metric::Novelty,
        Metric::Usefulness,
        Metric::Specificity,
        Metric::Coverage,
        Metric::Completeness,
        Metric::Intrusiveness,
        Metric::Redundancy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::ClinicalRelevance => "clinical_relevance",
            Metric::Novelty => "novelty",
            Metric::Usefulness => "usefulness",
            Metric::Specificity => "specificity",
            Metric::Coverage => "coverage",
            Metric::Completeness => "completeness",
            Metric::Intrusiveness => "intrusiveness",
            Metric::Redundancy => "redundancy",
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Metric::ClinicalRelevance | Metric::Novelty | Metric::Usefulness => Category::Insightfulness,
            _ => Category::Trustworthiness,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "clinicalrelevance" | "clinicallyrelevant" => Metric::ClinicalRelevance,
            "novelty" => Metric::Novelty,
            "usefulness" => Metric::Usefulness,
            "specificity" => Metric::Specificity,
            "coverage" => Metric::Coverage,
            "completeness" => Metric::Completeness,
            "intrusiveness" | "intruder" => Metric::Intrusiveness,
            "redundancy" => Metric::Redundancy,
            _ => return Err(EvalError::UnknownMetric(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricWeights {
    pub clinical_relevance: f64,
    pub novelty: f64,
    pub usefulness: f64,
    pub specificity: f64,
    pub coverage: f64,
    pub completeness: f64,
    pub intrusiveness: f64,
    pub redundancy: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self {
            clinical_relevance: 0.25,
            novelty: 0.20,
            usefulness: 0.15,
            specificity: 0.10,
            coverage: 0.10,
            completeness: 0.08,
            intrusiveness: 0.07,
            redundancy: 0.05,
        }
    }
}

impl MetricWeights {
    pub fn weight(&self, m: Metric) -> f64 {
        match m {
            Metric::ClinicalRelevance => self.clinical_relevance,
            Metric::Novelty => self.novelty,
            Metric::Usefulness => self.usefulness,
            Metric::Specificity => self.specificity,
            Metric::Coverage => self.coverage,
            Metric::Completeness => self.completeness,
            Metric::Intrusiveness => self.intrusiveness,
            Metric::Redundancy => self.redundancy,
        }
    }

    pub fn sum(&self) -> f64 {
        Metric::ALL.iter().map(|&m| self.weight(m)).sum()
    }

    /// Non-negative weights summing to 1 (within 1e-9).
    pub fn validate(&self) -> Result<(), EvalError> {
        if Metric::ALL.iter().any(|&m| self.weight(m) < 0.0) || (self.sum() - 1.0).abs() > 1e-9 {
            return Err(EvalError::OutOfRange(self.sum()));
        }
        Ok(())
    }
}

pub type Ratings = BTreeMap<Metric, f64>;

fn rating(r: &Ratings, m: Metric) -> Result<f64, EvalError> {
    let v = *r.get(&m).ok_or(EvalError::MissingMetric(m))?;
    if !(1.0..=3.0).contains(&v) {
        return Err(EvalError::OutOfRange(v));
    }
    Ok(v)
}

/// Weighted sum of the eight metric scores.
pub fn total_score(ratings: &Ratings, weights: &MetricWeights) -> Result<f64, EvalError> {
    weights.validate()?;
    Metric::ALL
        .iter()
        .map(|&m| Ok(weights.weight(m) * rating(ratings, m)?))
        .sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryAggregation {
    /// Total-score weights renormalized within each category.
    #[default]
    Weighted,
    /// Plain mean of the member metrics.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub insightfulness: f64,
    pub trustworthiness: f64,
}

pub fn insight_trust_scores(
    ratings: &Ratings,
    weights: &MetricWeights,
    aggregation: CategoryAggregation,
) -> Result<CategoryScores, EvalError> {
    weights.validate()?;
    let score = |cat: Category| -> Result<f64, EvalError> {
        let (mut num, mut den) = (0.0, 0.0);
        for m in Metric::ALL.iter().filter(|m| m.category() == cat) {
            let w = match aggregation {
                CategoryAggregation::Weighted => weights.weight(*m),
                CategoryAggregation::Mean => 1.0,
            };
            num += w * rating(ratings, *m)?;
            den += w;
        }
        if den == 0.0 {
            return Err(EvalError::OutOfRange(den));
        }
        Ok(num / den)
    };
    Ok(CategoryScores {
        insightfulness: score(Category::Insightfulness)?,
        trustworthiness: score(Category::Trustworthiness)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater_id: String,
    pub item_id: String,
    pub metric: Metric,
    pub score: u8,
    /// Column of the report table (for example a strategy name).
    pub group: Option<String>,
}

#[derive(Deserialize)]
struct RawRating {
    rater_id: String,
    item_id: String,
    metric: String,
    score: String,
    #[serde(default)]
    group: Option<String>,
}

fn reader(text: &str, delimiter: u8) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// Reads a delimited ratings table with a header row.
pub fn parse_ratings(text: &str, delimiter: u8) -> Result<Vec<RatingRecord>, EvalError> {
    reader(text, delimiter)
        .deserialize::<RawRating>()
        .enumerate()
        .map(|(i, row)| {
            let perr = |message: String| EvalError::Parse { record: i + 1, message };
            let raw = row.map_err(|e| perr(e.to_string()))?;
            let metric = raw.metric.parse::<Metric>().map_err(|e| perr(e.to_string()))?;
            let score = match raw.score.as_str() {
                "1" => 1,
                "2" => 2,
                "3" => 3,
                other => return Err(perr(format!("score must be 1, 2 or 3, got '{other}'"))),
            };
            Ok(RatingRecord {
                rater_id: raw.rater_id,
                item_id: raw.item_id,
                metric,
                score,
                group: raw.group.filter(|g| !g.is_empty()),
            })
        })
        .collect()
}

pub const DEFAULT_GROUP: &str = "all";

/// Mean score per metric within each group.
pub fn mean_ratings(records: &[RatingRecord]) -> BTreeMap<String, Ratings> {
    let mut acc: BTreeMap<String, BTreeMap<Metric, (f64, usize)>> = BTreeMap::new();
    for r in records {
        let g = r.group.clone().unwrap_or_else(|| DEFAULT_GROUP.to_string());
        let e = acc.entry(g).or_default().entry(r.metric).or_default();
        e.0 += r.score as f64;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(g, ms)| (g, ms.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()))
        .collect()
}

/// Metric rows by group columns, followed by category and total rows.
/// Groups missing a metric show `-` for the rows that need it.
pub fn score_table(
    columns: &BTreeMap<String, Ratings>,
    weights: &MetricWeights,
    aggregation: CategoryAggregation,
) -> String {
    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let mut out = String::from("metric");
    for g in columns.keys() {
        out.push('\t');
        out.push_str(g);
    }
    out.push('\n');
    let mut row = |name: &str, f: &dyn Fn(&Ratings) -> Option<f64>| {
        out.push_str(name);
        for r in columns.values() {
            out.push('\t');
            out.push_str(&fmt_opt(f(r)));
        }
        out.push('\n');
    };
    for m in Metric::ALL {
        row(m.as_str(), &|r| r.get(&m).copied());
    }
    row("insightfulness", &|r| {
        insight_trust_scores(r, weights, aggregation)
            .ok()
            .map(|c| c.insightfulness)
    });
    row("trustworthiness", &|r| {
        insight_trust_scores(r, weights, aggregation)
            .ok()
            .map(|c| c.trustworthiness)
    });
    row("total_score", &|r| total_score(r, weights).ok());
    out
}

/// Pairwise rater agreement per metric: observed agreement and kappa over
/// items both raters scored.
pub fn rating_agreement(records: &[RatingRecord], rater_a: &str, rater_b: &str) -> BTreeMap<Metric, (f64, f64)> {
    let mut out = BTreeMap::new();
    for m in Metric::ALL {
        let scores = |rater: &str| -> BTreeMap<(Option<String>, String), u8> {
            records
                .iter()
                .filter(|r| r.rater_id == rater && r.metric == m)
                .map(|r| ((r.group.clone(), r.item_id.clone()), r.score))
                .collect()
        };
        let (sa, sb) = (scores(rater_a), scores(rater_b));
        let (xa, xb): (Vec<u8>, Vec<u8>) = sa.iter().filter_map(|(k, &v)| sb.get(k).map(|&w| (v, w))).unzip();
        if let (Ok(o), Ok(k)) = (observed_agreement(&xa, &xb), cohen_kappa(&xa, &xb)) {
            out.insert(m, (o, k));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Question {
    Clarity,
    ConnectionQuality,
    TherapeuticInsight,
    Themes,
    Connections,
    TreatmentPlanning,
}

impl Question {
    pub fn as_str(&self) -> &'static str {
        match self {
            Question::Clarity => "clarity",
            Question::ConnectionQuality => "connection_quality",
            Question::TherapeuticInsight => "therapeutic_insight",
            Question::Themes => "themes",
            Question::Connections => "connections",
            Question::TreatmentPlanning => "treatment_planning",
        }
    }
}

impl FromStr for Question {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "clarity" => Question::Clarity,
            "connection_quality" => Question::ConnectionQuality,
            "therapeutic_insight" => Question::TherapeuticInsight,
            "themes" => Question::Themes,
            "connections" => Question::Connections,
            "treatment_planning" => Question::TreatmentPlanning,
            _ => return Err(EvalError::UnknownQuestion(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub rater_id: String,
    pub item_id: String,
    pub question: Question,
    pub choice: String,
}

/// Choices that count towards the residual rather than a candidate.
pub const RESIDUAL_CHOICES: [&str; 3] = ["tie", "abstain", ""];

pub fn is_residual(choice: &str) -> bool {
    RESIDUAL_CHOICES.contains(&choice.trim().to_ascii_lowercase().as_str())
}

#[derive(Deserialize)]
struct RawPreference {
    rater_id: String,
    item_id: String,
    question: String,
    choice: String,
}

pub fn parse_preferences(text: &str, delimiter: u8) -> Result<Vec<PreferenceRecord>, EvalError> {
    reader(text, delimiter)
        .deserialize::<RawPreference>()
        .enumerate()
        .map(|(i, row)| {
            let perr = |message: String| EvalError::Parse { record: i + 1, message };
            let raw = row.map_err(|e| perr(e.to_string()))?;
            Ok(PreferenceRecord {
                question: raw.question.parse().map_err(|e: EvalError| perr(e.to_string()))?,
                rater_id: raw.rater_id,
                item_id: raw.item_id,
                choice: raw.choice,
            })
        })
        .collect()
}

/// Rejects choices outside the candidates offered for an item. Items not in
/// `offered` are not checked.
pub fn check_choices(
    records: &[PreferenceRecord],
    offered: &BTreeMap<String, BTreeSet<String>>,
) -> Result<(), EvalError> {
    for r in records {
        if let Some(c) = offered.get(&r.item_id) {
            if !is_residual(&r.choice) && !c.contains(&r.choice) {
                return Err(EvalError::UnknownChoice {
                    item_id: r.item_id.clone(),
                    choice: r.choice.clone(),
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTally {
    pub responses: usize,
    /// Percentage of responses per candidate.
    pub percent: BTreeMap<String, f64>,
    /// Percentage of ties and abstentions.
    pub residual: f64,
}

pub fn preference_summary(records: &[PreferenceRecord]) -> BTreeMap<Question, PreferenceTally> {
    let mut counts: BTreeMap<Question, (usize, usize, BTreeMap<String, usize>)> = BTreeMap::new();
    for r in records {
        let e = counts.entry(r.question).or_default();
        e.0 += 1;
        if is_residual(&r.choice) {
            e.1 += 1;
        } else {
            *e.2.entry(r.choice.clone()).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(q, (n, res, per))| {
            let pct = |k: usize| 100.0 * k as f64 / n as f64;
            (
                q,
                PreferenceTally {
                    responses: n,
                    percent: per.into_iter().map(|(c, k)| (c, pct(k))).collect(),
                    residual: pct(res),
                },
            )
        })
        .collect()
}

/// Population for the dimension task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionPopulation {
    #[default]
    GoldPositive,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub run_id: usize,
    pub detection: Prf,
    pub dimensions_gold_positive: Prf,
    pub dimensions_all: Prf,
    /// Gold items with no prediction in this run, scored as negative.
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub items: usize,
    pub runs: Vec<RunScores>,
    /// Means over runs of precision, recall and F1.
    pub mean_detection: [f64; 3],
    pub mean_dimensions_gold_positive: [f64; 3],
    pub mean_dimensions_all: [f64; 3],
}

type ItemKey = (String, usize);

/// Merges multiple raters per utterance with [`resolve_gold`].
pub fn merge_gold(gold: &[AnnotationRecord]) -> Result<BTreeMap<ItemKey, ProcessAnnotation>, EvalError> {
    let mut out: BTreeMap<ItemKey, ProcessAnnotation> = BTreeMap::new();
    for r in gold {
        let key = (r.session_id.clone(), r.utterance_index);
        let a = r.annotation();
        let merged = match out.remove(&key) {
            Some(prev) => resolve_gold(&prev, &a)?,
            None => a,
        };
        out.insert(key, merged);
    }
    Ok(out)
}

fn mean3(xs: impl Iterator<Item = Prf> + Clone) -> [f64; 3] {
    let n = xs.clone().count().max(1) as f64;
    let (p, r, f) = xs.fold((0.0, 0.0, 0.0), |acc, x| {
        (acc.0 + x.precision, acc.1 + x.recall, acc.2 + x.f1)
    });
    [p / n, r / n, f / n]
}

/// Scores predictions against gold labels per run. Predictions are matched
/// on (session, utterance); those without gold are ignored.
pub fn detection_report(preds: &[AnnotationRecord], gold: &[AnnotationRecord]) -> Result<DetectionReport, EvalError> {
    let gold = merge_gold(gold)?;
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by_run: BTreeMap<usize, BTreeMap<ItemKey, &AnnotationRecord>> = BTreeMap::new();
    for p in preds {
        by_run
            .entry(p.run_id)
            .or_default()
            .insert((p.session_id.clone(), p.utterance_index), p);
    }
    if by_run.is_empty() {
        by_run.insert(0, BTreeMap::new());
    }
    let empty = BTreeSet::new();
    let runs: Vec<RunScores> = by_run
        .iter()
        .map(|(&run_id, ps)| {
            let mut pb = Vec::new();
            let mut gb = Vec::new();
            let (mut pd_pos, mut gd_pos, mut pd_all, mut gd_all) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let mut missing = 0;
            for (k, g) in &gold {
                let p = ps.get(k);
                if p.is_none() {
                    missing += 1;
                }
                pb.push(p.is_some_and(|p| p.is_process));
                gb.push(g.is_process);
                let pd = p.map_or(&empty, |p| &p.dimensions).clone();
                if g.is_process {
                    pd_pos.push(pd.clone());
                    gd_pos.push(g.dimensions.clone());
                }
                pd_all.push(pd);
                gd_all.push(g.dimensions.clone());
            }
            Ok(RunScores {
                run_id,
                detection: binary_prf(&pb, &gb)?,
                dimensions_gold_positive: multilabel_prf(&pd_pos, &gd_pos)?,
                dimensions_all: multilabel_prf(&pd_all, &gd_all)?,
                missing,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(DetectionReport {
        items: gold.len(),
        mean_detection: mean3(runs.iter().map(|r| r.detection)),
        mean_dimensions_gold_positive: mean3(runs.iter().map(|r| r.dimensions_gold_positive)),
        mean_dimensions_all: mean3(runs.iter().map(|r| r.dimensions_all)),
        runs,
    })
}

/// Per-label observed agreement and kappa between two raters, plus the
/// presence decision, as a tab-separated table.
pub fn annotator_agreement_table(a: &[AnnotationRecord], b: &[AnnotationRecord]) -> Result<String, EvalError> {
    let key = |r: &AnnotationRecord| (r.session_id.clone(), r.utterance_index);
    let ma: BTreeMap<ItemKey, &AnnotationRecord> = a.iter().map(|r| (key(r), r)).collect();
    let mb: BTreeMap<ItemKey, &AnnotationRecord> = b.iter().map(|r| (key(r), r)).collect();
    let shared: Vec<(&AnnotationRecord, &AnnotationRecord)> =
        ma.iter().filter_map(|(k, ra)| mb.get(k).map(|rb| (*ra, *rb))).collect();
    let pa: Vec<bool> = shared.iter().map(|(x, _)| x.is_process).collect();
    let pb: Vec<bool> = shared.iter().map(|(_, y)| y.is_process).collect();
    let da: Vec<BTreeSet<DimensionLabel>> = shared.iter().map(|(x, _)| x.dimensions.clone()).collect();
    let db: Vec<BTreeSet<DimensionLabel>> = shared.iter().map(|(_, y)| y.dimensions.clone()).collect();
    let mut out = String::from("label\tobserved_agreement\tkappa\n");
    out.push_str(&format!(
        "is_process\t{:.2}\t{:.2}\n",
        observed_agreement(&pa, &pb)?,
        cohen_kappa(&pa, &pb)?
    ));
    let obs = per_label_agreement(&da, &db)?;
    let kap = per_label_kappa(&da, &db)?;
    for d in DimensionLabel::ALL {
        out.push_str(&format!("{}\t{:.2}\t{:.2}\n", d.canonical_name(), obs[&d], kap[&d]));
    }
    Ok(out)
}
