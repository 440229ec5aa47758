//! Seeded clustering scenarios answered by a scripted backend.

use std::collections::BTreeSet;
use std::sync::Arc;

use procnet_core::cluster::{
    validate_clustering, ClusterEngine, ClusterOptions, Clustering, ProcessItem, RepairAction, Violation,
};
use procnet_core::detect::DimensionLabel;
use procnet_core::evalkit::completeness_score;
use procnet_core::llm_gateway::{BackendSpec, CompletionRequest, Gateway, GatewayError, SchemaId};
use procnet_core::network::{assemble, completeness, Provenance};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

pub const CORRECTION_MARK: &str = "Correction: the previous assignment";
pub const REASSIGN_MARK: &str = "were not assigned to any theme";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Clean,
    Omissions,
    Undersized,
    Degenerate,
    Noisy,
}

pub const KINDS: [Kind; 5] = [
    Kind::Clean,
    Kind::Omissions,
    Kind::Undersized,
    Kind::Degenerate,
    Kind::Noisy,
];

#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: Kind,
    pub processes: Vec<ProcessItem>,
    pub themes: Vec<String>,
    pub first: Vec<BTreeSet<usize>>,
    pub omitted: BTreeSet<usize>,
    pub corrected: Vec<BTreeSet<usize>>,
    pub reassign: Vec<(usize, usize)>,
}

/// Every process in exactly one of `m` themes, each theme at least two.
pub fn partition(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<BTreeSet<usize>> {
    let m = m.min(n / 2).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = vec![BTreeSet::new(); m];
    for (i, p) in order.iter().enumerate() {
        let slot = if i < 2 * m { i / 2 } else { rng.gen_range(0..m) };
        out[slot].insert(*p);
    }
    out
}

pub fn scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = KINDS[seed as usize % KINDS.len()];
    let n = rng.gen_range(3..=12);
    let processes: Vec<ProcessItem> = (0..n)
        .map(|i| {
            let k = rng.gen_range(1..=2);
            let dims: BTreeSet<DimensionLabel> = DimensionLabel::ALL.choose_multiple(&mut rng, k).copied().collect();
            ProcessItem {
                id: format!("P{:03}", 10 + i),
                text: format!("Synthetic process statement {i}"),
                dimensions: dims,
                source_utterance_index: 10 + i,
            }
        })
        .collect();
    let m = rng.gen_range(2..=4);
    let themes: Vec<String> = (0..m)
        .map(|k| format!("Theme {k} captures a recurring pattern."))
        .collect();
    let mut first = partition(n, m, &mut rng);
    first.resize(m, BTreeSet::new());
    let mut omitted = BTreeSet::new();
    let mut reassign = Vec::new();
    match kind {
        Kind::Clean => {}
        Kind::Omissions | Kind::Noisy => {
            let drop = rng.gen_range(1..=n.div_ceil(2));
            for p in (0..n).collect::<Vec<_>>().choose_multiple(&mut rng, drop) {
                omitted.insert(*p);
            }
            for t in &mut first {
                t.retain(|p| !omitted.contains(p));
            }
            if kind == Kind::Omissions {
                for p in &omitted {
                    if rng.gen_bool(0.5) {
                        reassign.push((*p, rng.gen_range(0..m)));
                    }
                }
            }
        }
        Kind::Undersized => {
            let victim = rng.gen_range(0..m);
            let keep = first[victim].iter().next().copied();
            first[victim] = keep.into_iter().collect();
            let lost: Vec<usize> = (0..n).filter(|p| !first.iter().any(|t| t.contains(p))).collect();
            for p in lost {
                let other = (victim + 1) % m;
                first[other].insert(p);
            }
        }
        Kind::Degenerate => {
            let all: BTreeSet<usize> = (0..n).collect();
            first = vec![BTreeSet::new(); m];
            first[rng.gen_range(0..m)] = all;
        }
    }
    let corrected = if n == 3 {
        vec![BTreeSet::from([0, 1]), BTreeSet::from([1, 2])]
    } else {
        partition(n, m, &mut rng)
    };
    Scenario {
        kind,
        processes,
        themes,
        first,
        omitted,
        corrected,
        reassign,
    }
}

fn assignment(s: &Scenario, groups: &[BTreeSet<usize>], noise: bool) -> Value {
    let mut obj = Map::new();
    for (k, g) in groups.iter().enumerate() {
        let mut members: Vec<Value> = g.iter().map(|p| json!(s.processes[*p].id)).collect();
        if noise && k == 0 {
            members.push(json!("P999"));
        }
        obj.insert(
            format!("Theme {}", k + 1),
            json!({"Theme": s.themes[k], "Processes": members}),
        );
    }
    Value::Object(obj)
}

/// The scripted backend for one scenario.
pub fn backend(s: Scenario) -> impl Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync {
    move |req: &CompletionRequest| {
        let v = match req.schema_id {
            SchemaId::ThemeList => json!(s.themes),
            SchemaId::ThemeAssignment if req.prompt.contains(CORRECTION_MARK) => assignment(&s, &s.corrected, false),
            SchemaId::ThemeAssignment if req.prompt.contains(REASSIGN_MARK) => {
                let mut groups = vec![BTreeSet::new(); s.themes.len()];
                for (p, t) in &s.reassign {
                    groups[*t].insert(*p);
                }
                assignment(&s, &groups, s.kind == Kind::Noisy)
            }
            SchemaId::ThemeAssignment => assignment(&s, &s.first, s.kind == Kind::Noisy),
            other => panic!("unexpected schema {other}"),
        };
        Ok(v.to_string())
    }
}

pub fn run(s: &Scenario, repair: bool) -> Clustering {
    let gw = Gateway::new(Arc::new(backend(s.clone())));
    let engine = ClusterEngine::new(
        &gw,
        BackendSpec::mock("scripted", "scripted-model"),
        ClusterOptions {
            repair,
            ..ClusterOptions::default()
        },
    );
    engine
        .two_step("Therapist: Hello.\nPatient: Hi.", &s.processes)
        .unwrap()
}

/// Asserts the repaired contracts for one seeded scenario.
pub fn check_repaired(seed: u64) -> Kind {
    let s = scenario(seed);
    let c = run(&s, true);
    let left = validate_clustering(&c, &s.processes);
    assert!(left.is_empty(), "seed {seed} ({:?}): {left:?}", s.kind);
    assert!(c.uncovered.is_empty());
    assert!(c.clusters.iter().all(|t| t.members.len() >= 2), "seed {seed}");
    let covered: BTreeSet<&str> = c
        .clusters
        .iter()
        .flat_map(|t| t.members.iter().map(String::as_str))
        .collect();
    assert_eq!(covered.len(), s.processes.len(), "seed {seed}");
    if s.processes.len() >= 3 {
        assert!(
            c.clusters.iter().all(|t| t.members.len() < s.processes.len()),
            "seed {seed}: degenerate"
        );
    }
    if s.kind == Kind::Degenerate {
        assert!(c
            .diagnostics
            .repairs
            .contains(&RepairAction::DegeneracyRequery { resolved: true }));
    }
    if s.kind == Kind::Noisy {
        assert!(
            c.diagnostics.discarded.iter().any(|d| d.contains("P999")),
            "seed {seed}"
        );
    }
    // Every theme the model named is either present or accounted for in
    // the repair log.
    let present: BTreeSet<&str> = c.clusters.iter().map(|t| t.label.as_str()).collect();
    let documented = c.diagnostics.repairs.iter().any(|r| {
        matches!(
            r,
            RepairAction::Merged { .. } | RepairAction::Dropped { .. } | RepairAction::DegeneracyRequery { .. }
        )
    });
    assert!(
        present.len() == s.themes.len() || documented,
        "seed {seed}: theme vanished without a record"
    );
    s.kind
}

/// Asserts that without repair the completeness score counts exactly the
/// scripted omissions.
pub fn check_unrepaired(seed: u64) {
    let s = scenario(seed);
    let c = run(&s, false);
    let n = s.processes.len() as f64;
    let expected_uncovered: BTreeSet<String> = s.omitted.iter().map(|p| s.processes[*p].id.clone()).collect();
    assert_eq!(c.uncovered, expected_uncovered, "seed {seed}");
    assert_eq!(c.diagnostics.unresolved, c.diagnostics.violations);
    let net = assemble("s", &c, &s.processes, &[], Provenance::new("prompt_based")).unwrap();
    let f = completeness(&net, &s.processes);
    assert!((f - (n - s.omitted.len() as f64) / n).abs() < 1e-12, "seed {seed}");
    let score = completeness_score(f).unwrap();
    assert!((score - (1.0 + 2.0 * f)).abs() < 1e-12);
    if s.kind == Kind::Degenerate {
        assert!(c
            .diagnostics
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Degenerate { .. })));
    }
}
