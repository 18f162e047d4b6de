//! Domain model for step-wise GUI-agent data.
//!
//! An [`Action`] is one typed tool call from the fixed 15-tool catalog. Every
//! action has a canonical text rendering (arguments in catalog order, declared
//! defaults materialized, absent optionals shown as `∅`) and decomposes into a
//! multiset of `(key, value)` items used by the scoring layer. An
//! [`AgentResponse`] is the structured output of one agent turn; a
//! [`Trajectory`] is an ordered list of step records exchanged on disk as
//! JSONL, one object per line.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};
use thiserror::Error;

/// Rendering of an absent optional argument in canonical action text.
pub const ABSENT: &str = "∅";

/// Every tool name accepted in an action list, in catalog order.
pub const TOOL_NAMES: [&str; 15] = [
    "search_google",
    "done",
    "click_element_by_index",
    "scroll",
    "switch_tab",
    "go_back",
    "extract_structured_data",
    "input_text",
    "refresh",
    "wait",
    "scroll_to_text",
    "go_to_url",
    "read_file",
    "send_keys",
    "select_dropdown_option",
];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("bad canonical action `{text}`: {message}")]
    Canonical { text: String, message: String },
}

/// Why a tool call was rejected while building an [`Action`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToolCallError {
    /// Offending argument key, when one can be named.
    pub key: Option<String>,
    pub message: String,
    /// True when the tool name itself is not in the catalog.
    pub unknown_tool: bool,
}

impl ToolCallError {
    fn arg(key: &str, message: impl Into<String>) -> Self {
        ToolCallError { key: Some(key.to_string()), message: message.into(), unknown_tool: false }
    }
}

impl std::fmt::Display for ToolCallError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{}: {}", k, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// One tool call. Argument defaults declared by the catalog
/// (`wait.seconds = 3`, `done.files_to_display = []`) are materialized at
/// construction, so two actions that differ only by an elided default compare
/// equal.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    SearchGoogle { query: String },
    Done { text: String, success: bool, files_to_display: Vec<String> },
    ClickElementByIndex { index: i64, delay: Option<i64> },
    Scroll { down: bool, num_pages: f64, index: Option<i64> },
    SwitchTab { page_id: i64 },
    GoBack,
    ExtractStructuredData { query: String, extract_links: bool },
    InputText { index: i64, text: String },
    Refresh,
    Wait { seconds: i64 },
    ScrollToText { text: String },
    GoToUrl { url: String, new_tab: bool },
    ReadFile { file_name: String },
    SendKeys { keys: String },
    SelectDropdownOption { index: i64, text: String },
}

/// A scorable argument value. String values get token-level fuzzy matching in
/// the scoring layer; every other variant requires exact equality.
#[derive(Clone, Debug, PartialEq)]
pub enum ItemValue {
    Str(String),
    Int(i64),
    Num(f64),
    Bool(bool),
    List(Vec<String>),
}

impl ItemValue {
    fn render(&self) -> String {
        match self {
            ItemValue::Str(s) => serde_json::to_string(s).expect("string encodes"),
            ItemValue::Int(i) => i.to_string(),
            ItemValue::Num(x) => format!("{x}"),
            ItemValue::Bool(b) => b.to_string(),
            ItemValue::List(xs) => serde_json::to_string(xs).expect("list encodes"),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            ItemValue::Str(s) => Value::String(s.clone()),
            ItemValue::Int(i) => json!(i),
            ItemValue::Num(x) => json!(x),
            ItemValue::Bool(b) => json!(b),
            ItemValue::List(xs) => json!(xs),
        }
    }
}

/// One argument slot: key, value if materialized, and whether an absent value
/// is a tolerated optional (rendered `∅`) rather than an error.
struct Slot {
    key: &'static str,
    value: Option<ItemValue>,
}

impl Action {
    pub fn tool_name(&self) -> &'static str {
        match self {
            Action::SearchGoogle { .. } => "search_google",
            Action::Done { .. } => "done",
            Action::ClickElementByIndex { .. } => "click_element_by_index",
            Action::Scroll { .. } => "scroll",
            Action::SwitchTab { .. } => "switch_tab",
            Action::GoBack => "go_back",
            Action::ExtractStructuredData { .. } => "extract_structured_data",
            Action::InputText { .. } => "input_text",
            Action::Refresh => "refresh",
            Action::Wait { .. } => "wait",
            Action::ScrollToText { .. } => "scroll_to_text",
            Action::GoToUrl { .. } => "go_to_url",
            Action::ReadFile { .. } => "read_file",
            Action::SendKeys { .. } => "send_keys",
            Action::SelectDropdownOption { .. } => "select_dropdown_option",
        }
    }

    /// Argument slots in catalog order, with defaults already materialized.
    fn slots(&self) -> Vec<Slot> {
        use ItemValue::*;
        let some = |v: ItemValue| Some(v);
        match self {
            Action::SearchGoogle { query } => vec![Slot { key: "query", value: some(Str(query.clone())) }],
            Action::Done { text, success, files_to_display } => vec![
                Slot { key: "text", value: some(Str(text.clone())) },
                Slot { key: "success", value: some(Bool(*success)) },
                Slot { key: "files_to_display", value: some(List(files_to_display.clone())) },
            ],
            Action::ClickElementByIndex { index, delay } => vec![
                Slot { key: "index", value: some(Int(*index)) },
                Slot { key: "delay", value: delay.map(Int) },
            ],
            Action::Scroll { down, num_pages, index } => vec![
                Slot { key: "down", value: some(Bool(*down)) },
                Slot { key: "num_pages", value: some(Num(*num_pages)) },
                Slot { key: "index", value: index.map(Int) },
            ],
            Action::SwitchTab { page_id } => vec![Slot { key: "page_id", value: some(Int(*page_id)) }],
            Action::GoBack => vec![],
            Action::ExtractStructuredData { query, extract_links } => vec![
                Slot { key: "query", value: some(Str(query.clone())) },
                Slot { key: "extract_links", value: some(Bool(*extract_links)) },
            ],
            Action::InputText { index, text } => vec![
                Slot { key: "index", value: some(Int(*index)) },
                Slot { key: "text", value: some(Str(text.clone())) },
            ],
            Action::Refresh => vec![],
            Action::Wait { seconds } => vec![Slot { key: "seconds", value: some(Int(*seconds)) }],
            Action::ScrollToText { text } => vec![Slot { key: "text", value: some(Str(text.clone())) }],
            Action::GoToUrl { url, new_tab } => vec![
                Slot { key: "url", value: some(Str(url.clone())) },
                Slot { key: "new_tab", value: some(Bool(*new_tab)) },
            ],
            Action::ReadFile { file_name } => vec![Slot { key: "file_name", value: some(Str(file_name.clone())) }],
            Action::SendKeys { keys } => vec![Slot { key: "keys", value: some(Str(keys.clone())) }],
            Action::SelectDropdownOption { index, text } => vec![
                Slot { key: "index", value: some(Int(*index)) },
                Slot { key: "text", value: some(Str(text.clone())) },
            ],
        }
    }

    /// Builds an action from a tool name and a JSON argument object, applying
    /// catalog defaults and rejecting unknown tools, unknown or missing keys,
    /// wrong types, negative indices/delays/seconds, and non-positive page
    /// counts.
    pub fn from_parts(tool: &str, args: &Map<String, Value>) -> Result<Action, ToolCallError> {
        let mut r = ArgReader::new(args);
        let action = match tool {
            "search_google" => Action::SearchGoogle { query: r.req_str("query")? },
            "done" => Action::Done {
                text: r.req_str("text")?,
                success: r.req_bool("success")?,
                files_to_display: r.opt_str_list("files_to_display")?.unwrap_or_default(),
            },
            "click_element_by_index" => Action::ClickElementByIndex {
                index: r.req_int("index")?,
                delay: r.opt_int("delay")?,
            },
            "scroll" => Action::Scroll {
                down: r.req_bool("down")?,
                num_pages: r.req_num_pos("num_pages")?,
                index: r.opt_int("index")?,
            },
            "switch_tab" => Action::SwitchTab { page_id: r.req_int("page_id")? },
            "go_back" => Action::GoBack,
            "extract_structured_data" => Action::ExtractStructuredData {
                query: r.req_str("query")?,
                extract_links: r.req_bool("extract_links")?,
            },
            "input_text" => Action::InputText { index: r.req_int("index")?, text: r.req_str("text")? },
            "refresh" => Action::Refresh,
            "wait" => Action::Wait { seconds: r.opt_int("seconds")?.unwrap_or(3) },
            "scroll_to_text" => Action::ScrollToText { text: r.req_str("text")? },
            "go_to_url" => Action::GoToUrl { url: r.req_str("url")?, new_tab: r.req_bool("new_tab")? },
            "read_file" => Action::ReadFile { file_name: r.req_str("file_name")? },
            "send_keys" => Action::SendKeys { keys: r.req_str("keys")? },
            "select_dropdown_option" => Action::SelectDropdownOption {
                index: r.req_int("index")?,
                text: r.req_str("text")?,
            },
            other => {
                return Err(ToolCallError {
                    key: None,
                    message: format!("unknown tool `{other}`"),
                    unknown_tool: true,
                })
            }
        };
        r.finish()?;
        Ok(action)
    }

    /// `{"tool_name": {args...}}` with arguments in catalog order, defaults
    /// materialized, and absent optionals omitted.
    pub fn to_value(&self) -> Value {
        let mut args = Map::new();
        for slot in self.slots() {
            if let Some(v) = slot.value {
                args.insert(slot.key.to_string(), v.to_json());
            }
        }
        let mut outer = Map::new();
        outer.insert(self.tool_name().to_string(), Value::Object(args));
        Value::Object(outer)
    }

    /// Inverse of [`Action::to_value`]; accepts any single-key
    /// `{"tool": {args}}` object.
    pub fn from_value(v: &Value) -> Result<Action, ToolCallError> {
        let obj = v.as_object().ok_or_else(|| ToolCallError {
            key: None,
            message: "tool call must be an object".to_string(),
            unknown_tool: false,
        })?;
        if obj.len() != 1 {
            return Err(ToolCallError {
                key: None,
                message: format!("tool call must have exactly one key, found {}", obj.len()),
                unknown_tool: false,
            });
        }
        let (tool, args) = obj.iter().next().expect("one entry");
        let args = args.as_object().ok_or_else(|| ToolCallError {
            key: None,
            message: format!("{tool}: arguments must be an object"),
            unknown_tool: false,
        })?;
        Action::from_parts(tool, args)
    }
}

struct ArgReader<'a> {
    map: &'a Map<String, Value>,
    seen: Vec<&'a str>,
}

impl<'a> ArgReader<'a> {
    fn new(map: &'a Map<String, Value>) -> Self {
        ArgReader { map, seen: Vec::new() }
    }

    fn take(&mut self, key: &str) -> Option<&'a Value> {
        let v = self.map.get(key)?;
        let stored = self.map.keys().find(|k| *k == key).expect("key present");
        self.seen.push(stored.as_str());
        // Explicit null counts as absent, matching elided optionals.
        if v.is_null() {
            None
        } else {
            Some(v)
        }
    }

    fn req_str(&mut self, key: &str) -> Result<String, ToolCallError> {
        match self.take(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(ToolCallError::arg(key, "expected a string")),
            None => Err(ToolCallError::arg(key, "missing required argument")),
        }
    }

    fn req_bool(&mut self, key: &str) -> Result<bool, ToolCallError> {
        match self.take(key) {
            Some(Value::Bool(b)) => Ok(*b),
            Some(_) => Err(ToolCallError::arg(key, "expected a boolean")),
            None => Err(ToolCallError::arg(key, "missing required argument")),
        }
    }

    fn int_from(key: &str, v: &Value) -> Result<i64, ToolCallError> {
        let n = v
            .as_i64()
            .ok_or_else(|| ToolCallError::arg(key, "expected a non-negative integer"))?;
        if n < 0 {
            return Err(ToolCallError::arg(key, "expected a non-negative integer"));
        }
        Ok(n)
    }

    fn req_int(&mut self, key: &str) -> Result<i64, ToolCallError> {
        match self.take(key) {
            Some(v) => Self::int_from(key, v),
            None => Err(ToolCallError::arg(key, "missing required argument")),
        }
    }

    fn opt_int(&mut self, key: &str) -> Result<Option<i64>, ToolCallError> {
        match self.take(key) {
            Some(v) => Ok(Some(Self::int_from(key, v)?)),
            None => Ok(None),
        }
    }

    fn req_num_pos(&mut self, key: &str) -> Result<f64, ToolCallError> {
        match self.take(key) {
            Some(v) => {
                let x = v
                    .as_f64()
                    .ok_or_else(|| ToolCallError::arg(key, "expected a positive number"))?;
                if !(x.is_finite() && x > 0.0) {
                    return Err(ToolCallError::arg(key, "expected a positive number"));
                }
                Ok(x)
            }
            None => Err(ToolCallError::arg(key, "missing required argument")),
        }
    }

    fn opt_str_list(&mut self, key: &str) -> Result<Option<Vec<String>>, ToolCallError> {
        match self.take(key) {
            Some(Value::Array(xs)) => {
                let mut out = Vec::with_capacity(xs.len());
                for x in xs {
                    match x.as_str() {
                        Some(s) => out.push(s.to_string()),
                        None => return Err(ToolCallError::arg(key, "expected a list of strings")),
                    }
                }
                Ok(Some(out))
            }
            Some(_) => Err(ToolCallError::arg(key, "expected a list of strings")),
            None => Ok(None),
        }
    }

    fn finish(self) -> Result<(), ToolCallError> {
        for k in self.map.keys() {
            if !self.seen.contains(&k.as_str()) {
                return Err(ToolCallError::arg(k, "unknown argument"));
            }
        }
        Ok(())
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        Action::from_value(&v).map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Deterministic one-line rendering: tool name, then every argument slot in
/// catalog order, `∅` marking absent optionals. Strings and lists are
/// JSON-encoded so the rendering parses back unambiguously.
pub fn canonicalize(action: &Action) -> String {
    let parts: Vec<String> = action
        .slots()
        .iter()
        .map(|slot| {
            let rendered = match &slot.value {
                Some(v) => v.render(),
                None => ABSENT.to_string(),
            };
            format!("{}={}", slot.key, rendered)
        })
        .collect();
    format!("{}{{{}}}", action.tool_name(), parts.join(","))
}

/// Equality key for whole action lists.
pub fn canonical_action_list(actions: &[Action]) -> String {
    actions.iter().map(canonicalize).collect::<Vec<_>>().join(";")
}

/// Parses the output of [`canonicalize`] back into an action.
pub fn parse_canonical(text: &str) -> Result<Action, ModelError> {
    let err = |message: &str| ModelError::Canonical { text: text.to_string(), message: message.to_string() };
    let open = text.find('{').ok_or_else(|| err("missing `{`"))?;
    if !text.ends_with('}') {
        return Err(err("missing trailing `}`"));
    }
    let name = &text[..open];
    let inner = &text[open + 1..text.len() - 1];
    let mut args = Map::new();
    for part in split_top_level(inner).map_err(|m| err(&m))? {
        let eq = part.find('=').ok_or_else(|| err("argument without `=`"))?;
        let key = part[..eq].trim().to_string();
        let raw = part[eq + 1..].trim();
        if raw == ABSENT {
            continue;
        }
        let value = parse_canonical_value(raw).map_err(|m| err(&m))?;
        args.insert(key, value);
    }
    Action::from_parts(name, &args).map_err(|e| err(&e.to_string()))
}

/// Splits `a=1,b="x,y"` style argument text on commas that sit outside
/// strings and brackets.
fn split_top_level(s: &str) -> Result<Vec<String>, String> {
    let mut parts = Vec::new();
    let mut cur = String::new();
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for c in s.chars() {
        if in_str {
            cur.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_str = true;
                cur.push(c);
            }
            '[' => {
                depth += 1;
                cur.push(c);
            }
            ']' => {
                depth = depth.checked_sub(1).ok_or("unbalanced `]`")?;
                cur.push(c);
            }
            ',' if depth == 0 => {
                parts.push(std::mem::take(&mut cur));
            }
            _ => cur.push(c),
        }
    }
    if in_str {
        return Err("unterminated string".to_string());
    }
    if depth != 0 {
        return Err("unbalanced `[`".to_string());
    }
    if !cur.is_empty() {
        parts.push(cur);
    }
    Ok(parts)
}

fn parse_canonical_value(raw: &str) -> Result<Value, String> {
    if raw.starts_with('"') || raw.starts_with('[') {
        return serde_json::from_str(raw).map_err(|e| format!("bad literal `{raw}`: {e}"));
    }
    match raw {
        "true" => return Ok(Value::Bool(true)),
        "false" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if raw.contains(['.', 'e', 'E']) {
        let x: f64 = raw.parse().map_err(|_| format!("bad number `{raw}`"))?;
        Ok(json!(x))
    } else {
        let n: i64 = raw.parse().map_err(|_| format!("bad number `{raw}`"))?;
        Ok(json!(n))
    }
}

/// The scorable item multiset of one action: the tool name under the reserved
/// `__name__` key plus one item per materialized argument. Absent optionals
/// and empty lists contribute nothing.
pub fn action_items(action: &Action) -> Vec<(String, ItemValue)> {
    let mut items = vec![("__name__".to_string(), ItemValue::Str(action.tool_name().to_string()))];
    for slot in action.slots() {
        match slot.value {
            Some(ItemValue::List(xs)) if xs.is_empty() => {}
            Some(v) => items.push((slot.key.to_string(), v)),
            None => {}
        }
    }
    items
}

/// Structured output of one agent turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub think: String,
    pub evaluation_previous_goal: String,
    pub memory: String,
    pub next_goal: String,
    pub action: Vec<Action>,
}

impl AgentResponse {
    /// Field-level completeness: the four text fields non-empty (`think` only
    /// when `require_think`) and at least one action.
    pub fn well_formed(&self, require_think: bool) -> bool {
        (!require_think || !self.think.is_empty())
            && !self.evaluation_previous_goal.is_empty()
            && !self.memory.is_empty()
            && !self.next_goal.is_empty()
            && !self.action.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    #[serde(rename = "single-step")]
    SingleStep,
    #[serde(rename = "multi-step")]
    MultiStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Difficult,
    Ungraded,
}

/// Where a trajectory currently sits in the data flow. Not serialized; files
/// carry only the schema fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Source {
    #[default]
    Raw,
    Curated,
}

/// One rendered page observation. `elements` lists the full document in
/// order; the `interactive` flag is set only for elements currently inside
/// the viewport window, and exactly those elements carry the contiguous
/// indices `0..k` that index-addressed tools accept. Non-interactive entries
/// carry index `-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomSnapshot {
    pub url: String,
    pub elements: Vec<DomElement>,
    pub viewport_start: u32,
    pub tab_ids: Vec<u32>,
    pub history_depth: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomElement {
    pub index: i64,
    pub tag: String,
    pub text: String,
    pub interactive: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, String>,
}

impl DomSnapshot {
    pub fn validate(&self) -> Result<(), String> {
        if self.url.is_empty() {
            return Err("url is empty".to_string());
        }
        let mut indices: Vec<i64> = self
            .elements
            .iter()
            .filter(|e| e.interactive)
            .map(|e| e.index)
            .collect();
        indices.sort_unstable();
        for (want, got) in indices.iter().enumerate() {
            if *got != want as i64 {
                return Err(format!(
                    "interactive indices must be contiguous from 0, found {indices:?}"
                ));
            }
        }
        if !self.elements.is_empty() && self.viewport_start as usize >= self.elements.len() {
            return Err(format!(
                "viewport_start {} out of bounds for {} elements",
                self.viewport_start,
                self.elements.len()
            ));
        }
        Ok(())
    }
}

/// One agent turn: the prompt context, the observation, and the gold (and
/// optionally predicted) response. `gold` is optional at the schema level
/// because raw exports may lack it; curation drops such steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: u32,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_ref: Option<String>,
    pub dom: DomSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<AgentResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<AgentResponse>,
    /// Total steps of the owning trajectory; maintained in memory, not stored.
    #[serde(skip)]
    pub step_count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub kind: Kind,
    pub difficulty: Difficulty,
    pub steps: Vec<StepRecord>,
    #[serde(skip)]
    pub source: Source,
}

impl Trajectory {
    /// Restores derived per-step fields after construction or deserialization.
    pub fn normalize(&mut self) {
        let n = self.steps.len() as u32;
        for s in &mut self.steps {
            s.step_count = n;
        }
    }

    /// Structural invariants enforced at file boundaries: non-empty id and
    /// steps, step indices contiguous from 1, kind consistent with the step
    /// count.
    pub fn validate_shape(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".to_string());
        }
        if self.steps.is_empty() {
            return Err(format!("trajectory `{}` has no steps", self.id));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.step_index != i as u32 + 1 {
                return Err(format!(
                    "trajectory `{}`: step {} has index {}, expected {}",
                    self.id,
                    i,
                    s.step_index,
                    i + 1
                ));
            }
            s.dom.validate().map_err(|e| format!("trajectory `{}` step {}: {e}", self.id, i + 1))?;
        }
        match self.kind {
            Kind::SingleStep if self.steps.len() != 1 => Err(format!(
                "trajectory `{}` is single-step but has {} steps",
                self.id,
                self.steps.len()
            )),
            Kind::MultiStep if self.steps.len() < 2 => Err(format!(
                "trajectory `{}` is multi-step but has {} step",
                self.id,
                self.steps.len()
            )),
            _ => Ok(()),
        }
    }
}

/// Parses trajectory JSONL. Blank lines are rejected; every error names the
/// 1-based line it came from.
pub fn trajectories_from_str(text: &str) -> Result<Vec<Trajectory>, ModelError> {
    let mut out: Vec<Trajectory> = Vec::new();
    let mut seen_ids = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let schema = |message: String| ModelError::Schema { line: lineno, message };
        let mut t: Trajectory =
            serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        t.normalize();
        t.validate_shape().map_err(schema)?;
        if !seen_ids.insert(t.id.clone()) {
            return Err(schema(format!("duplicate trajectory id `{}`", t.id)));
        }
        out.push(t);
    }
    Ok(out)
}

/// Canonical JSONL rendering: one compact JSON object per line, fields in
/// schema order. `trajectories_from_str` followed by this function is
/// byte-preserving on canonical input.
pub fn trajectories_to_string(trajectories: &[Trajectory]) -> String {
    let mut s = String::new();
    for t in trajectories {
        s.push_str(&serde_json::to_string(t).expect("trajectory encodes"));
        s.push('\n');
    }
    s
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    trajectories_from_str(&text)
}

pub fn write_trajectories(
    path: impl AsRef<Path>,
    trajectories: &[Trajectory],
) -> Result<(), ModelError> {
    let path = path.as_ref();
    std::fs::write(path, trajectories_to_string(trajectories)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}
