//! Validators for every structured output the pipeline requests.

use serde_json::Value;

use crate::detect::DimensionLabel;
use crate::llm_gateway::{SchemaError, SchemaId, SchemaRegistry};
use crate::util::sentence_count;

pub fn default_registry() -> SchemaRegistry {
    let mut r = SchemaRegistry::empty();
    r.register(SchemaId::Detection, validate_detection)
        .register(SchemaId::ThemeList, validate_theme_list)
        .register(SchemaId::ThemeAssignment, validate_theme_assignment)
        .register(SchemaId::LinkOpinion, validate_link_opinion)
        .register(SchemaId::DirectNetwork, validate_direct_network);
    r
}

fn invalid(msg: impl Into<String>) -> SchemaError {
    SchemaError::invalid(msg)
}

/// `{"is_process": bool, "types": [label...]}`; positives need at least one
/// label and negatives none.
pub fn validate_detection(v: &Value) -> Result<(), SchemaError> {
    let obj = v.as_object().ok_or_else(|| invalid("expected a JSON object"))?;
    let is_process = obj
        .get("is_process")
        .and_then(Value::as_bool)
        .ok_or_else(|| invalid("'is_process' must be true or false"))?;
    let types = match obj.get("types") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(a)) => a.clone(),
        Some(_) => return Err(invalid("'types' must be a list")),
    };
    for t in &types {
        let s = t.as_str().ok_or_else(|| invalid("'types' entries must be strings"))?;
        s.parse::<DimensionLabel>()?;
    }
    match (is_process, types.is_empty()) {
        (true, true) => Err(invalid("'is_process' is true but 'types' is empty")),
        (false, false) => Err(invalid("'is_process' is false but 'types' is not empty")),
        _ => Ok(()),
    }
}

/// A non-empty list of one-sentence theme strings.
pub fn validate_theme_list(v: &Value) -> Result<(), SchemaError> {
    let arr = v.as_array().ok_or_else(|| invalid("expected a list of themes"))?;
    if arr.is_empty() {
        return Err(invalid("theme list is empty"));
    }
    for t in arr {
        let s = t.as_str().ok_or_else(|| invalid("themes must be strings"))?;
        validate_theme_label(s)?;
    }
    Ok(())
}

pub fn validate_theme_label(s: &str) -> Result<(), SchemaError> {
    match sentence_count(s) {
        0 => Err(invalid("theme label is empty")),
        1 => Ok(()),
        n => Err(invalid(format!(
            "theme '{s}' has {n} sentences; each theme must be one sentence"
        ))),
    }
}

fn string_list<'a>(v: Option<&'a Value>, what: &str) -> Result<Vec<&'a str>, SchemaError> {
    let arr = v
        .and_then(Value::as_array)
        .ok_or_else(|| invalid(format!("'{what}' must be a list")))?;
    arr.iter()
        .map(|x| match x {
            Value::String(s) => Ok(s.as_str()),
            Value::Object(o) => o
                .get("Process")
                .and_then(Value::as_str)
                .ok_or_else(|| invalid(format!("'{what}' entries must be strings"))),
            _ => Err(invalid(format!("'{what}' entries must be strings"))),
        })
        .collect()
}

/// `{"Theme 1": {"Theme": label, "Processes": [..]}, ...}`
pub fn validate_theme_assignment(v: &Value) -> Result<(), SchemaError> {
    let obj = v
        .as_object()
        .ok_or_else(|| invalid("expected a JSON object of themes"))?;
    if obj.is_empty() {
        return Err(invalid("no themes in output"));
    }
    for (key, entry) in obj {
        let e = entry
            .as_object()
            .ok_or_else(|| invalid(format!("'{key}' must be an object")))?;
        let label = e
            .get("Theme")
            .and_then(Value::as_str)
            .ok_or_else(|| invalid(format!("'{key}' is missing a 'Theme' string")))?;
        validate_theme_label(label)?;
        string_list(e.get("Processes"), "Processes")?;
    }
    Ok(())
}

/// Reads `connection` given as `[1]`, `1`, `true` or their negatives.
pub fn connection_flag(v: Option<&Value>) -> Option<bool> {
    match v? {
        Value::Array(a) if a.len() == 1 => connection_flag(a.first()),
        Value::Number(n) => match n.as_i64() {
            Some(1) => Some(true),
            Some(0) => Some(false),
            _ => None,
        },
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim() {
            "1" => Some(true),
            "0" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// Reads a single enum-like string, also accepting a one-element list.
pub fn single_string(v: Option<&Value>) -> Option<&str> {
    match v? {
        Value::String(s) => Some(s.as_str()),
        Value::Array(a) if a.len() == 1 => a[0].as_str(),
        _ => None,
    }
}

fn check_relationship(r: &Value, type_key: &str, strength_key: &str) -> Result<(), SchemaError> {
    let connected = connection_flag(r.get("connection")).ok_or_else(|| invalid("'connection' must be [1] or [0]"))?;
    if !connected {
        return Ok(());
    }
    let ty =
        single_string(r.get(type_key)).ok_or_else(|| invalid(format!("'{type_key}' is required when connected")))?;
    ty.parse::<crate::links::EdgeType>().map_err(|_| {
        invalid(format!(
            "'{type_key}' must be \"excitatory\" or \"inhibitory\", got '{ty}'"
        ))
    })?;
    let st = single_string(r.get(strength_key))
        .ok_or_else(|| invalid(format!("'{strength_key}' is required when connected")))?;
    st.parse::<crate::links::Strength>().map_err(|_| {
        invalid(format!(
            "'{strength_key}' must be \"strong\", \"moderate\" or \"weak\", got '{st}'"
        ))
    })?;
    match r.get("explanation").and_then(Value::as_str) {
        Some(s) if !s.trim().is_empty() => Ok(()),
        _ => Err(invalid("'explanation' is required when connected")),
    }
}

/// `{"relationship": [{"connection": [1], "relationship_type": ..,
/// "strength_of_relationship": .., "explanation": ..}]}`
pub fn validate_link_opinion(v: &Value) -> Result<(), SchemaError> {
    let first = v
        .get("relationship")
        .and_then(Value::as_array)
        .and_then(|a| a.first())
        .ok_or_else(|| invalid("'relationship' must be a non-empty list"))?;
    check_relationship(first, "relationship_type", "strength_of_relationship")
}

/// `{"classified_processes": {..}, "theme_relationships": [..]}`
pub fn validate_direct_network(v: &Value) -> Result<(), SchemaError> {
    let classified = v
        .get("classified_processes")
        .and_then(Value::as_object)
        .ok_or_else(|| invalid("'classified_processes' must be an object"))?;
    if classified.is_empty() {
        return Err(invalid("'classified_processes' is empty"));
    }
    for (key, entry) in classified {
        let title = entry
            .get("Title")
            .and_then(Value::as_str)
            .ok_or_else(|| invalid(format!("'{key}' is missing a 'Title' string")))?;
        if title.trim().is_empty() {
            return Err(invalid(format!("'{key}' has an empty title")));
        }
        string_list(entry.get("Processes"), "Processes")?;
    }
    let rels = v
        .get("theme_relationships")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("'theme_relationships' must be a list"))?;
    for r in rels {
        r.get("input_themes")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2 && a.iter().all(Value::is_string))
            .ok_or_else(|| invalid("'input_themes' must list exactly two theme titles"))?;
        check_relationship(r, "type", "strength")?;
    }
    Ok(())
}

/// Extracts the strings of a `Processes` list, accepting `{"Process": ..}`
/// objects as produced by the direct-generation format.
pub fn process_strings(v: Option<&Value>) -> Vec<String> {
    string_list(v, "Processes")
        .map(|l| l.into_iter().map(str::to_string).collect())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn detection_shapes() {
        assert!(validate_detection(&json!({"is_process": false, "types": []})).is_ok());
        assert!(validate_detection(&json!({"is_process": false})).is_ok());
        assert!(validate_detection(&json!({"is_process": "yes", "types": []})).is_err());
        assert!(validate_detection(&json!([1])).is_err());
        assert_eq!(
            validate_detection(&json!({"is_process": true, "types": ["Bogus"]})),
            Err(SchemaError::UnknownLabel("Bogus".into()))
        );
    }

    #[test]
    fn theme_list_one_sentence_each() {
        assert!(validate_theme_list(&json!(["Fear of failure drives avoidance."])).is_ok());
        assert!(validate_theme_list(&json!([])).is_err());
        assert!(validate_theme_list(&json!(["Two. Sentences."])).is_err());
        assert!(validate_theme_list(&json!({"a": 1})).is_err());
    }

    #[test]
    fn assignment_shape() {
        let ok = json!({"Theme 1": {"Theme": "A theme.", "Processes": ["P1", "P2"]}});
        assert!(validate_theme_assignment(&ok).is_ok());
        assert!(validate_theme_assignment(&json!({})).is_err());
        assert!(validate_theme_assignment(&json!({"Theme 1": {"Processes": []}})).is_err());
    }

    #[test]
    fn link_opinion_shapes() {
        let yes = json!({"relationship": [{"input_processes": ["A", "B"], "connection": [1],
            "relationship_type": "excitatory", "strength_of_relationship": "strong",
            "explanation": "because"}]});
        assert!(validate_link_opinion(&yes).is_ok());
        let no = json!({"relationship": [{"input_processes": ["A", "B"], "connection": [0]}]});
        assert!(validate_link_opinion(&no).is_ok());
        let bad_type = json!({"relationship": [{"connection": [1], "relationship_type": "causal",
            "strength_of_relationship": "strong", "explanation": "x"}]});
        assert!(validate_link_opinion(&bad_type).is_err());
        let no_expl = json!({"relationship": [{"connection": 1, "relationship_type": "inhibitory",
            "strength_of_relationship": "weak"}]});
        assert!(validate_link_opinion(&no_expl).is_err());
        assert!(validate_link_opinion(&json!({"relationship": []})).is_err());
    }

    #[test]
    fn connection_flag_forms() {
        assert_eq!(connection_flag(Some(&json!([1]))), Some(true));
        assert_eq!(connection_flag(Some(&json!(0))), Some(false));
        assert_eq!(connection_flag(Some(&json!(true))), Some(true));
        assert_eq!(connection_flag(Some(&json!([2]))), None);
        assert_eq!(connection_flag(None), None);
    }

    #[test]
    fn direct_network_shape() {
        let ok = json!({
            "classified_processes": {"Theme 1": {"Title": "A", "Processes": [{"Process": "P1"}]}},
            "theme_relationships": [
                {"input_themes": ["A", "B"], "connection": [1], "type": ["excitatory"],
                 "strength": ["strong"], "explanation": "x"},
                {"input_themes": ["A", "C"], "connection": [0]}
            ]
        });
        assert!(validate_direct_network(&ok).is_ok());
        assert_eq!(
            process_strings(ok["classified_processes"]["Theme 1"].get("Processes")),
            vec!["P1".to_string()]
        );
        let bad = json!({"classified_processes": {}, "theme_relationships": []});
        assert!(validate_direct_network(&bad).is_err());
    }
}
