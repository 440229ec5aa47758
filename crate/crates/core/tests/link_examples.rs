use std::sync::Arc;

use procnet_core::links::{
    agreement_stats, group_by_pair, EdgeType, EnsembleStrategy, LinkEngine, LinkOptions, Strength, LINK_EXAMPLES,
};
use procnet_core::llm_gateway::{BackendSpec, Gateway};

mod common;
use common::link_table::{hand_tallied, table_backend, table_themes};

#[test]
fn ensemble_reproduces_the_illustrative_table() {
    let themes = table_themes();
    let gw = Gateway::new(Arc::new(table_backend));
    let engine = LinkEngine::new(&gw, LinkOptions::default());
    let run = engine
        .run_ensemble(
            &EnsembleStrategy::prompt_based(&BackendSpec::mock("llama", "llama-3.1-70b-instruct")),
            &themes,
        )
        .unwrap();
    assert_eq!(run.opinions.len(), 6 * 5 * 3);
    let got: Vec<(&str, &str, EdgeType, Strength, Option<u8>)> = run
        .edges
        .iter()
        .map(|e| {
            (
                e.source_theme.as_str(),
                e.target_theme.as_str(),
                e.edge_type,
                e.strength,
                e.votes_for,
            )
        })
        .collect();
    assert_eq!(
        got,
        vec![
            ("T01", "T02", EdgeType::Excitatory, Strength::Strong, Some(3)),
            ("T05", "T06", EdgeType::Inhibitory, Strength::Strong, Some(3)),
        ]
    );
    assert_eq!(run.edges[0].explanation, LINK_EXAMPLES[0].relation.unwrap().2);
    let peer = &group_by_pair(&run.opinions)[&("T03".to_string(), "T04".to_string())];
    assert!(peer.iter().all(|o| !o.connected && !o.abstained));
}

#[test]
fn agreement_on_hand_tallied_fixture() {
    let s = agreement_stats(&hand_tallied()).unwrap();
    assert_eq!(
        (
            s.pairs,
            s.unanimous_connection,
            s.all_connected,
            s.unanimous_type,
            s.unanimous_strength
        ),
        (10, 7, 5, 4, 2)
    );
    assert_eq!(s.connection_pct, Some(70.0));
    assert_eq!(s.type_pct, Some(80.0));
    assert_eq!(s.strength_pct, Some(50.0));
}
