//! Structured-response parsing and the binary format check.
//!
//! A raw model output must be a JSON object with the fields `think`,
//! `evaluation_previous_goal`, `memory`, `next_goal`, and `action`, where
//! `action` is a non-empty list of single-key `{"tool": {args}}` objects.
//! Parsing accumulates every failure it can find rather than stopping at the
//! first, so a verdict names all missing fields and every malformed action
//! element at once. Unknown top-level fields are tolerated and surface as
//! warnings.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{Action, AgentResponse};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCode {
    NotParseable,
    MissingField,
    EmptyField,
    BadActionShape,
    UnknownTool,
    BadArgument,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub code: FailureCode,
    /// Location of the problem, e.g. `memory` or `action[0].scroll.num_pages`.
    pub path: String,
    pub message: String,
}

/// Outcome of the format check. `ok` holds exactly when `failures` is empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    pub ok: bool,
    pub failures: Vec<Failure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Accept an empty `think` field. The other text fields must always be
    /// non-empty.
    pub allow_empty_think: bool,
}

const TEXT_FIELDS: [&str; 4] = ["think", "evaluation_previous_goal", "memory", "next_goal"];
const ALL_FIELDS: [&str; 5] = ["think", "evaluation_previous_goal", "memory", "next_goal", "action"];

/// Parses raw model output into a typed response, or returns the full list of
/// format failures.
pub fn parse_response(raw: &str, opts: &ParseOptions) -> Result<AgentResponse, FormatVerdict> {
    let mut failures = Vec::new();
    let mut warnings = Vec::new();

    let fail = |failures: Vec<Failure>, warnings: Vec<String>| FormatVerdict {
        ok: false,
        failures,
        warnings,
    };

    let value: Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(e) => {
            failures.push(Failure {
                code: FailureCode::NotParseable,
                path: String::new(),
                message: format!("not valid JSON: {e}"),
            });
            return Err(fail(failures, warnings));
        }
    };
    let obj = match value.as_object() {
        Some(o) => o,
        None => {
            failures.push(Failure {
                code: FailureCode::NotParseable,
                path: String::new(),
                message: "top level is not a JSON object".to_string(),
            });
            return Err(fail(failures, warnings));
        }
    };

    for key in obj.keys() {
        if !ALL_FIELDS.contains(&key.as_str()) {
            warnings.push(format!("ignored unknown field `{key}`"));
        }
    }

    let mut texts: Vec<String> = Vec::with_capacity(TEXT_FIELDS.len());
    for field in TEXT_FIELDS {
        match obj.get(field) {
            None => {
                failures.push(Failure {
                    code: FailureCode::MissingField,
                    path: field.to_string(),
                    message: "required field is missing".to_string(),
                });
                texts.push(String::new());
            }
            Some(Value::String(s)) => {
                let empty_ok = field == "think" && opts.allow_empty_think;
                if s.is_empty() && !empty_ok {
                    failures.push(Failure {
                        code: FailureCode::EmptyField,
                        path: field.to_string(),
                        message: "field must be non-empty".to_string(),
                    });
                }
                texts.push(s.clone());
            }
            Some(_) => {
                failures.push(Failure {
                    code: FailureCode::MissingField,
                    path: field.to_string(),
                    message: "expected a string".to_string(),
                });
                texts.push(String::new());
            }
        }
    }

    let mut actions: Vec<Action> = Vec::new();
    match obj.get("action") {
        None => failures.push(Failure {
            code: FailureCode::MissingField,
            path: "action".to_string(),
            message: "required field is missing".to_string(),
        }),
        Some(Value::Array(items)) => {
            if items.is_empty() {
                failures.push(Failure {
                    code: FailureCode::BadActionShape,
                    path: "action".to_string(),
                    message: "action list must not be empty".to_string(),
                });
            }
            for (i, item) in items.iter().enumerate() {
                match check_action_element(item, i) {
                    Ok(a) => actions.push(a),
                    Err(f) => failures.push(f),
                }
            }
        }
        Some(_) => failures.push(Failure {
            code: FailureCode::BadActionShape,
            path: "action".to_string(),
            message: "expected a list of tool calls".to_string(),
        }),
    }

    if failures.is_empty() {
        let mut it = texts.into_iter();
        Ok(AgentResponse {
            think: it.next().expect("four text fields"),
            evaluation_previous_goal: it.next().expect("four text fields"),
            memory: it.next().expect("four text fields"),
            next_goal: it.next().expect("four text fields"),
            action: actions,
        })
    } else {
        Err(fail(failures, warnings))
    }
}

fn check_action_element(item: &Value, i: usize) -> Result<Action, Failure> {
    let obj = match item.as_object() {
        Some(o) => o,
        None => {
            return Err(Failure {
                code: FailureCode::BadActionShape,
                path: format!("action[{i}]"),
                message: "tool call must be an object".to_string(),
            })
        }
    };
    if obj.len() != 1 {
        return Err(Failure {
            code: FailureCode::BadActionShape,
            path: format!("action[{i}]"),
            message: format!("tool call must have exactly one key, found {}", obj.len()),
        });
    }
    let (tool, args) = obj.iter().next().expect("one entry");
    let args = match args.as_object() {
        Some(a) => a,
        None => {
            return Err(Failure {
                code: FailureCode::BadActionShape,
                path: format!("action[{i}].{tool}"),
                message: "arguments must be an object".to_string(),
            })
        }
    };
    Action::from_parts(tool, args).map_err(|e| {
        if e.unknown_tool {
            Failure {
                code: FailureCode::UnknownTool,
                path: format!("action[{i}].{tool}"),
                message: e.message,
            }
        } else {
            let path = match &e.key {
                Some(k) => format!("action[{i}].{tool}.{k}"),
                None => format!("action[{i}].{tool}"),
            };
            Failure { code: FailureCode::BadArgument, path, message: e.message }
        }
    })
}

/// The format check as a reward: 1 when the raw text parses cleanly, else 0.
pub fn format_reward(raw: &str, opts: &ParseOptions) -> u8 {
    match parse_response(raw, opts) {
        Ok(_) => 1,
        Err(_) => 0,
    }
}

/// Canonical JSON for a response: fields in schema order, actions as
/// single-key objects with arguments in catalog order and defaults
/// materialized. `parse_response` inverts this exactly.
pub fn serialize_response(response: &AgentResponse) -> String {
    serde_json::to_string(response).expect("response encodes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts() -> ParseOptions {
        ParseOptions::default()
    }

    fn valid_raw() -> String {
        r#"{"think":"inspect the page","evaluation_previous_goal":"Success - loaded","memory":"at start","next_goal":"open profile","action":[{"click_element_by_index":{"index":2}}]}"#
            .to_string()
    }

    #[test]
    fn empty_input_is_not_parseable() {
        let v = parse_response("", &opts()).unwrap_err();
        assert!(!v.ok);
        assert_eq!(v.failures.len(), 1);
        assert_eq!(v.failures[0].code, FailureCode::NotParseable);
        assert_eq!(format_reward("", &opts()), 0);
    }

    #[test]
    fn non_object_top_level_is_not_parseable() {
        let v = parse_response("[1,2,3]", &opts()).unwrap_err();
        assert_eq!(v.failures[0].code, FailureCode::NotParseable);
    }

    #[test]
    fn valid_response_parses_and_scores_one() {
        let r = parse_response(&valid_raw(), &opts()).unwrap();
        assert_eq!(r.action.len(), 1);
        assert_eq!(format_reward(&valid_raw(), &opts()), 1);
    }

    #[test]
    fn empty_action_list_fails_shape_check() {
        let raw = valid_raw().replace("[{\"click_element_by_index\":{\"index\":2}}]", "[]");
        let v = parse_response(&raw, &opts()).unwrap_err();
        assert_eq!(v.failures.len(), 1);
        assert_eq!(v.failures[0].code, FailureCode::BadActionShape);
        assert_eq!(v.failures[0].path, "action");
    }

    #[test]
    fn coordinate_style_call_is_a_bad_argument() {
        let raw = valid_raw().replace("{\"index\":2}", "{\"x\":10,\"y\":20}");
        let v = parse_response(&raw, &opts()).unwrap_err();
        assert_eq!(v.failures.len(), 1);
        assert_eq!(v.failures[0].code, FailureCode::BadArgument);
        assert!(v.failures[0].path.starts_with("action[0].click_element_by_index."));
    }

    #[test]
    fn failures_accumulate_across_fields_and_elements() {
        let raw = r#"{"think":"t","evaluation_previous_goal":"","next_goal":"n","action":[{"fly":{}},{"wait":{}},{"click_element_by_index":{"index":-3}}]}"#;
        let v = parse_response(raw, &opts()).unwrap_err();
        let codes: Vec<FailureCode> = v.failures.iter().map(|f| f.code).collect();
        assert!(codes.contains(&FailureCode::EmptyField), "{v:?}");
        assert!(codes.contains(&FailureCode::MissingField), "{v:?}");
        assert!(codes.contains(&FailureCode::UnknownTool), "{v:?}");
        assert!(codes.contains(&FailureCode::BadArgument), "{v:?}");
        assert_eq!(v.failures.len(), 4);
    }

    #[test]
    fn empty_think_is_gated_by_option() {
        let raw = valid_raw().replace("\"think\":\"inspect the page\"", "\"think\":\"\"");
        assert_eq!(format_reward(&raw, &opts()), 0);
        assert_eq!(format_reward(&raw, &ParseOptions { allow_empty_think: true }), 1);
    }

    #[test]
    fn unknown_top_level_fields_warn_but_pass() {
        let raw = valid_raw().replacen('{', "{\"extra\":1,", 1);
        let r = parse_response(&raw, &opts());
        assert!(r.is_ok());
        assert_eq!(format_reward(&raw, &opts()), 1);
    }

    #[test]
    fn serialize_then_parse_round_trips() {
        let r = parse_response(&valid_raw(), &opts()).unwrap();
        let s = serialize_response(&r);
        let back = parse_response(&s, &opts()).unwrap();
        assert_eq!(back, r);
        assert_eq!(s, valid_raw());
    }

    proptest! {
        #[test]
        fn arbitrary_input_never_panics(raw in "\\PC{0,60}") {
            let reward = format_reward(&raw, &opts());
            prop_assert!(reward <= 1);
            if let Err(v) = parse_response(&raw, &opts()) {
                prop_assert!(!v.ok);
                prop_assert!(!v.failures.is_empty());
            }
        }

        #[test]
        fn verdict_ok_iff_failures_empty(raw in "[ -~]{0,80}") {
            match parse_response(&raw, &opts()) {
                Ok(_) => {}
                Err(v) => prop_assert!(!v.ok && !v.failures.is_empty()),
            }
        }
    }
}
