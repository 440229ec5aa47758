use procnet_core::links::{vote, EdgeType, LinkOpinion, Strength};

mod common;
use common::oracles::{check_all_triples, opinion};

#[test]
fn matches_reference_on_every_triple() {
    assert_eq!(check_all_triples(), 343);
}

#[test]
fn abstentions_count_as_no_connection() {
    let ops = vec![
        LinkOpinion::abstention("m1", "T01", "T02", "timeout"),
        opinion("m2", Some((EdgeType::Excitatory, Strength::Weak))),
        opinion("m3", Some((EdgeType::Excitatory, Strength::Moderate))),
    ];
    let e = vote(&ops, 0).unwrap().unwrap();
    assert_eq!(
        (e.strength, e.votes_for, e.explanation_variant.as_str()),
        (Strength::Moderate, Some(2), "m3")
    );
    let ops = vec![
        LinkOpinion::abstention("m1", "T01", "T02", "timeout"),
        LinkOpinion::abstention("m2", "T01", "T02", "timeout"),
        opinion("m3", Some((EdgeType::Excitatory, Strength::Moderate))),
    ];
    assert_eq!(vote(&ops, 0).unwrap(), None);
}

#[test]
fn tied_explanations_depend_only_on_seed_and_pair() {
    let s = Some((EdgeType::Inhibitory, Strength::Strong));
    let ops = vec![opinion("m1", s), opinion("m2", s), opinion("m3", s)];
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..64 {
        let e = vote(&ops, seed).unwrap().unwrap();
        assert_eq!(vote(&ops, seed).unwrap().unwrap(), e);
        seen.insert(e.explanation_variant);
    }
    assert!(seen.len() > 1, "seed never changes the draw");
}
