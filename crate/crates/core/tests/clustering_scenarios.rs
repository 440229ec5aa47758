//! Randomized clustering scenarios against a scripted backend: omissions,
//! undersized themes, unknown members and single-cluster degeneracy.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use procnet_core::cluster::{ClusterEngine, ClusterOptions, ProcessItem, RepairAction, Violation};
use procnet_core::detect::DimensionLabel;
use procnet_core::llm_gateway::{BackendSpec, CompletionRequest, Gateway, GatewayError, SchemaId};
use serde_json::json;

mod common;
use common::scenarios::{check_repaired, check_unrepaired};

#[test]
fn repaired_clusterings_meet_contracts() {
    let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..50 {
        *by_kind.entry(format!("{:?}", check_repaired(seed))).or_default() += 1;
    }
    assert!(by_kind.values().all(|&k| k == 10), "{by_kind:?}");
}

#[test]
fn no_repair_completeness_reflects_omissions() {
    for seed in 0..50 {
        check_unrepaired(seed);
    }
}

#[test]
fn persistent_degeneracy_is_kept_with_a_recorded_violation() {
    let processes: Vec<ProcessItem> = (0..4)
        .map(|i| ProcessItem {
            id: format!("P{:03}", i),
            text: format!("p{i}"),
            dimensions: BTreeSet::from([DimensionLabel::Affect]),
            source_utterance_index: i,
        })
        .collect();
    let all: Vec<String> = processes.iter().map(|p| p.id.clone()).collect();
    let stubborn = move |req: &CompletionRequest| -> Result<String, GatewayError> {
        Ok(match req.schema_id {
            SchemaId::ThemeList => json!(["One theme.", "Another theme."]),
            _ => json!({"Theme 1": {"Theme": "One theme.", "Processes": all}}),
        }
        .to_string())
    };
    let gw = Gateway::new(Arc::new(stubborn));
    let engine = ClusterEngine::new(&gw, BackendSpec::mock("m", "m"), ClusterOptions::default());
    let c = engine.two_step("Patient: Hi.", &processes).unwrap();
    assert!(c
        .diagnostics
        .repairs
        .contains(&RepairAction::DegeneracyRequery { resolved: false }));
    assert!(matches!(
        c.diagnostics.unresolved.as_slice(),
        [Violation::Degenerate { .. }]
    ));
}
