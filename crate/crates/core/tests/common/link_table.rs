//! A backend scripted to the illustrative link table, and a hand-tallied
//! agreement fixture.

use procnet_core::links::{EdgeType, LinkOpinion, Strength, ThemeRef, LINK_EXAMPLES};
use procnet_core::llm_gateway::{CompletionRequest, GatewayError};
use serde_json::json;

/// The pair under test is the last `Process A` / `Process B` in the prompt;
/// earlier ones belong to the illustrative examples.
pub fn target_pair(prompt: &str) -> (String, String) {
    let tail = &prompt[prompt.rfind("Process A: ").expect("pair in prompt")..];
    let a = tail["Process A: ".len()..].lines().next().unwrap().trim().to_string();
    let b_at = tail.find("Process B: ").unwrap();
    let b = tail[b_at + "Process B: ".len()..]
        .lines()
        .next()
        .unwrap()
        .trim()
        .to_string();
    (a, b)
}

/// Answers exactly as the illustrative table does, and "no connection" for
/// every pair the table does not list.
pub fn table_backend(req: &CompletionRequest) -> Result<String, GatewayError> {
    let (a, b) = target_pair(&req.prompt);
    let row = LINK_EXAMPLES.iter().find(|r| r.process_a == a && r.process_b == b);
    let rel = match row.and_then(|r| r.relation) {
        Some((t, s, why)) => json!({
            "input_processes": [a, b], "connection": [1],
            "relationship_type": t.as_str(), "strength_of_relationship": s.as_str(), "explanation": why,
        }),
        None => json!({"input_processes": [a, b], "connection": [0]}),
    };
    Ok(json!({ "relationship": [rel] }).to_string())
}

/// Both processes of every table row, numbered T01, T02, ... in table order.
pub fn table_themes() -> Vec<ThemeRef> {
    LINK_EXAMPLES
        .iter()
        .flat_map(|r| [r.process_a, r.process_b])
        .enumerate()
        .map(|(i, label)| ThemeRef::new(format!("T{:02}", i + 1), label))
        .collect()
}

pub fn op(v: &str, x: Option<(EdgeType, Strength)>) -> LinkOpinion {
    match x {
        Some((t, s)) => LinkOpinion::connected(v, "A", "B", t, s, "x"),
        None => LinkOpinion::none(v, "A", "B"),
    }
}

/// Ten pairs tallied by hand: 7 unanimous on connection, 5 with all three
/// connected, 4 of those unanimous on type, 2 of those on strength.
pub fn hand_tallied() -> Vec<Vec<LinkOpinion>> {
    use EdgeType::*;
    use Strength::*;
    let rows: [[Option<(EdgeType, Strength)>; 3]; 10] = [
        [None, None, None],
        [
            Some((Excitatory, Strong)),
            Some((Excitatory, Strong)),
            Some((Excitatory, Strong)),
        ],
        [
            Some((Excitatory, Strong)),
            Some((Excitatory, Moderate)),
            Some((Excitatory, Strong)),
        ],
        [
            Some((Excitatory, Weak)),
            Some((Inhibitory, Weak)),
            Some((Excitatory, Weak)),
        ],
        [None, Some((Excitatory, Strong)), Some((Excitatory, Strong))],
        [
            Some((Inhibitory, Moderate)),
            Some((Inhibitory, Moderate)),
            Some((Inhibitory, Moderate)),
        ],
        [None, None, Some((Inhibitory, Weak))],
        [
            Some((Inhibitory, Strong)),
            Some((Inhibitory, Weak)),
            Some((Inhibitory, Strong)),
        ],
        [None, None, None],
        [Some((Excitatory, Moderate)), Some((Excitatory, Moderate)), None],
    ];
    rows.iter()
        .map(|r| vec![op("m1", r[0]), op("m2", r[1]), op("m3", r[2])])
        .collect()
}
