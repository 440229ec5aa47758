use std::collections::BTreeSet;

use procnet_core::detect::DimensionLabel;
use procnet_core::links::{vote, EdgeType, LinkOpinion, Strength};

/// Precision, recall and F1 straight from the definitions, with 0/0 = 0.
pub fn prf_from(tp: f64, fp: f64, fn_: f64) -> (f64, f64, f64) {
    let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

pub fn oracle_binary(p: &[bool], g: &[bool]) -> (f64, f64, f64) {
    let tp = p.iter().zip(g).filter(|(a, b)| **a && **b).count() as f64;
    let fp = p.iter().zip(g).filter(|(a, b)| **a && !**b).count() as f64;
    let fn_ = p.iter().zip(g).filter(|(a, b)| !**a && **b).count() as f64;
    prf_from(tp, fp, fn_)
}

/// Counts every (item, label) decision over the full label set.
pub fn oracle_multilabel(p: &[BTreeSet<DimensionLabel>], g: &[BTreeSet<DimensionLabel>]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (ps, gs) in p.iter().zip(g) {
        for d in DimensionLabel::ALL {
            match (ps.contains(&d), gs.contains(&d)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    prf_from(tp, fp, fn_)
}

pub fn oracle_agreement<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let mut same = 0usize;
    for i in 0..a.len() {
        if a[i] == b[i] {
            same += 1;
        }
    }
    same as f64 / a.len() as f64
}

/// Kappa via an explicit confusion matrix.
pub fn oracle_kappa(a: &[u8], b: &[u8]) -> f64 {
    let cats: Vec<u8> = {
        let mut c: Vec<u8> = a.iter().chain(b).copied().collect();
        c.sort();
        c.dedup();
        c
    };
    let k = cats.len();
    let pos = |x: u8| cats.iter().position(|&c| c == x).unwrap();
    let mut m = vec![vec![0.0f64; k]; k];
    for (x, y) in a.iter().zip(b) {
        m[pos(*x)][pos(*y)] += 1.0;
    }
    let n = a.len() as f64;
    let diag: f64 = (0..k).map(|i| m[i][i]).sum();
    let p_o = diag / n;
    let p_e: f64 = (0..k)
        .map(|i| {
            let row: f64 = m[i].iter().sum();
            let col: f64 = (0..k).map(|j| m[j][i]).sum();
            row * col / (n * n)
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        1.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    }
}

pub type State = Option<(EdgeType, Strength)>;

pub fn states() -> Vec<State> {
    let mut v = vec![None];
    for t in EdgeType::ALL {
        for s in Strength::ALL {
            v.push(Some((t, s)));
        }
    }
    v
}

pub fn opinion(variant: &str, s: State) -> LinkOpinion {
    match s {
        Some((t, st)) => LinkOpinion::connected(variant, "T01", "T02", t, st, format!("why {variant}")),
        None => LinkOpinion::none(variant, "T01", "T02"),
    }
}

/// Reference rule: the largest same-type group of connected opinions wins
/// when it has at least two members; its strongest members supply the
/// explanation.
pub struct Expected {
    pub edge_type: EdgeType,
    pub strength: Strength,
    pub votes: u8,
    pub explanations: Vec<String>,
}

pub fn reference(ops: &[LinkOpinion]) -> Option<Expected> {
    for t in EdgeType::ALL {
        let members: Vec<&LinkOpinion> = ops.iter().filter(|o| o.connected && o.edge_type == Some(t)).collect();
        if members.len() >= 2 {
            let strength = members.iter().filter_map(|o| o.strength).max().unwrap();
            let explanations = members
                .iter()
                .filter(|o| o.strength == Some(strength))
                .map(|o| o.explanation.clone().unwrap())
                .collect();
            return Some(Expected {
                edge_type: t,
                strength,
                votes: members.len() as u8,
                explanations,
            });
        }
    }
    None
}

pub fn permutations() -> [[usize; 3]; 6] {
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]]
}

/// Compares `vote` with the reference on all 343 triples and every ordering
/// of each; returns the number of triples checked.
pub fn check_all_triples() -> usize {
    let all = states();
    assert_eq!(all.len(), 7);
    let mut checked = 0;
    for a in &all {
        for b in &all {
            for c in &all {
                let ops = vec![opinion("m1", *a), opinion("m2", *b), opinion("m3", *c)];
                let got = vote(&ops, 42).unwrap();
                match (reference(&ops), &got) {
                    (None, None) => {}
                    (Some(e), Some(edge)) => {
                        assert_eq!(edge.edge_type, e.edge_type);
                        assert_eq!(edge.strength, e.strength);
                        assert_eq!(edge.votes_for, Some(e.votes));
                        assert!(e.explanations.contains(&edge.explanation), "{:?}", edge);
                        assert_eq!(format!("why {}", edge.explanation_variant), edge.explanation);
                    }
                    (e, g) => panic!("{a:?} {b:?} {c:?}: expected {:?}, got {g:?}", e.map(|x| x.edge_type)),
                }
                for p in permutations() {
                    let permuted: Vec<LinkOpinion> = p.iter().map(|&i| ops[i].clone()).collect();
                    assert_eq!(vote(&permuted, 42).unwrap(), got);
                }
                checked += 1;
            }
        }
    }
    checked
}
