//! Every pinned prompt, rendered from the bundled fixtures.

use std::path::PathBuf;

use procnet_core::baseline::build_baseline_prompt;
use procnet_core::cluster::{
    build_assign_prompt, build_generate_themes_prompt, build_reassign_prompt, build_single_step_prompt, process_items,
    ProcessItem,
};
use procnet_core::detect::{
    build_detection_prompt, parse_annotation_records, parse_example_pool, sample_examples, DimensionLabel,
    LabeledExample, ProcessAnnotation,
};
use procnet_core::links::{build_link_prompt, PromptShots};
use procnet_core::transcript::{context_window, load_session, working_phase, Session};

/// Resolves from either crate's manifest directory.
fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(name: &str) -> PathBuf {
    workspace().join("fixtures").join(name)
}

pub fn golden_path(name: &str) -> PathBuf {
    workspace().join("crates/core/tests/golden").join(name)
}

pub fn session() -> Session {
    load_session(fixture("session_a.jsonl")).unwrap()
}

const ANNOTATIONS: &str = r#"{"session_id":"session_a","utterance_index":31,"is_process":true,"dimensions":["Affect"],"run_id":0}
{"session_id":"session_a","utterance_index":35,"is_process":true,"dimensions":["Motivation"],"run_id":0}
{"session_id":"session_a","utterance_index":37,"is_process":true,"dimensions":["Affect","Cognition"],"run_id":0}
{"session_id":"session_a","utterance_index":43,"is_process":true,"dimensions":["Cognition","SenseOfSelf"],"run_id":0}
"#;

pub fn processes(s: &Session) -> Vec<ProcessItem> {
    process_items(s, &parse_annotation_records(ANNOTATIONS).unwrap())
}

pub fn transcript(s: &Session) -> String {
    Session::render_text(&working_phase(s, 15.0, 5.0).utterances)
}

pub const THEMES: [&str; 2] = [
    "Fear of permanent stagnation fuels frustration and anxiety.",
    "Self-doubt drives avoidance of demanding goals.",
];

/// Golden file name and rendered prompt, one per pinned template.
pub fn rendered() -> Vec<(&'static str, String)> {
    let s = session();
    let pool = parse_example_pool(&std::fs::read_to_string(fixture("example_pool.jsonl")).unwrap()).unwrap();
    let target = context_window(&s, 35, 2, 2).unwrap();
    let (t, p) = (transcript(&s), processes(&s));
    let themes: Vec<String> = THEMES.iter().map(|x| x.to_string()).collect();
    vec![
        (
            "detection_k5.txt",
            build_detection_prompt(&sample_examples(&pool, 5, 3).unwrap(), &target),
        ),
        ("detection_k0.txt", build_detection_prompt(&[], &target)),
        ("cluster_generate.txt", build_generate_themes_prompt(&t, &p)),
        ("cluster_assign.txt", build_assign_prompt(&t, &p, &themes)),
        ("cluster_single_step.txt", build_single_step_prompt(&t, &p)),
        ("cluster_reassign.txt", build_reassign_prompt(&t, &p[..1], &themes)),
        (
            "link_zero_shot.txt",
            build_link_prompt(PromptShots::Zero, THEMES[0], THEMES[1]),
        ),
        (
            "link_one_shot.txt",
            build_link_prompt(PromptShots::One, THEMES[0], THEMES[1]),
        ),
        (
            "link_few_shot.txt",
            build_link_prompt(PromptShots::Few, THEMES[0], THEMES[1]),
        ),
        ("baseline.txt", build_baseline_prompt(&t, &p)),
    ]
}

/// Substring each golden file must contain.
pub fn anchor(name: &str) -> Option<&'static str> {
    match name {
        "detection_k5.txt" | "detection_k0.txt" => Some("You are a psychological process classifier"),
        "cluster_generate.txt" => Some("Generate clinically meaningful themes"),
        n if n.starts_with("link_") => Some("determine whether a relationship exists"),
        _ => None,
    }
}

/// A synthetic pool large enough for every allowed k.
pub fn big_pool() -> Vec<LabeledExample> {
    (0..240)
        .map(|i| LabeledExample {
            utterance: format!("utterance number {i}"),
            context: serde_json::from_str(r#"{"before":[],"after":[]}"#).unwrap(),
            gold: if i % 3 == 0 {
                ProcessAnnotation::negative(i)
            } else {
                ProcessAnnotation::positive(i, [DimensionLabel::ALL[i % 9]])
            },
        })
        .collect()
}
