//! Deterministic simulated web environment.
//!
//! A [`SiteGraph`] fixture fixes a small universe of pages, each an ordered
//! element list plus a key/value fact table, together with a search index
//! mapping token sets to result pages. Episodes run against a [`Simulator`]:
//! one `step` call applies one action list, every action yields an
//! [`ActionOutcome`], and failed actions leave the state untouched apart from
//! the step counter. Observations expose only elements inside the viewport
//! window as interactive, so content further down a page must be scrolled to
//! before it can be clicked.
//!
//! [`oracle_trajectory`] searches the reachable state space breadth-first
//! over a fixed candidate-action alphabet and returns a minimal successful
//! action sequence for a task, which makes it both a gold-data generator and
//! a reference agent.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, AgentResponse, DomElement, DomSnapshot};
use crate::util::tokens_contained;

pub const SITE_SCHEMA_VERSION: u32 = 1;
pub const TASK_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_STEPS: u32 = 20;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture: {0}")]
    Fixture(String),
    #[error("episode already terminated")]
    AlreadyTerminated,
    #[error("no successful action sequence within {max_steps} steps for task `{task}`")]
    NoSolution { task: String, max_steps: u32 },
}

/// One page element. Order in the page defines document order; the viewport
/// window slides over this list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PageElement {
    Text { text: String },
    Link { text: String, target: String },
    Button { text: String, target: String },
    Input {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        submit: Option<String>,
    },
    Dropdown { text: String, options: Vec<String> },
}

impl PageElement {
    fn is_interactive(&self) -> bool {
        !matches!(self, PageElement::Text { .. })
    }

    fn text(&self) -> &str {
        match self {
            PageElement::Text { text }
            | PageElement::Link { text, .. }
            | PageElement::Button { text, .. }
            | PageElement::Input { text, .. }
            | PageElement::Dropdown { text, .. } => text,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub elements: Vec<PageElement>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub facts: BTreeMap<String, String>,
}

/// A whole simulated site. `pages` and `search_index` preserve file order;
/// search ties resolve toward earlier entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteGraph {
    pub schema_version: u32,
    pub start_url: String,
    pub viewport_size: usize,
    pub pages: IndexMap<String, Page>,
    pub search_index: IndexMap<String, Vec<String>>,
}

impl SiteGraph {
    /// Internal consistency: the start page exists, every navigation target
    /// and search result resolves within the graph, and the viewport has
    /// positive size.
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.schema_version != SITE_SCHEMA_VERSION {
            return Err(EnvError::Fixture(format!(
                "unsupported site schema_version {} (expected {SITE_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.viewport_size == 0 {
            return Err(EnvError::Fixture("viewport_size must be at least 1".to_string()));
        }
        if !self.pages.contains_key(&self.start_url) {
            return Err(EnvError::Fixture(format!("start_url `{}` is not a page", self.start_url)));
        }
        for (url, page) in &self.pages {
            for el in &page.elements {
                let target = match el {
                    PageElement::Link { target, .. } | PageElement::Button { target, .. } => {
                        Some(target)
                    }
                    PageElement::Input { submit: Some(t), .. } => Some(t),
                    _ => None,
                };
                if let Some(t) = target {
                    if !self.pages.contains_key(t) {
                        return Err(EnvError::Fixture(format!(
                            "page `{url}` points at unknown target `{t}`"
                        )));
                    }
                }
            }
        }
        for (key, urls) in &self.search_index {
            if urls.is_empty() {
                return Err(EnvError::Fixture(format!("search entry `{key}` has no results")));
            }
            for u in urls {
                if !self.pages.contains_key(u) {
                    return Err(EnvError::Fixture(format!(
                        "search entry `{key}` points at unknown page `{u}`"
                    )));
                }
            }
        }
        Ok(())
    }

    /// First page (in file order) carrying the fact key.
    pub fn fact_value(&self, key: &str) -> Option<&str> {
        self.pages.values().find_map(|p| p.facts.get(key).map(String::as_str))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    InfoSearch,
    Verification,
}

/// One episode goal. Success requires the value of every required fact to be
/// token-contained in the final report, and, when set, the episode to end on
/// `target_url`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub schema_version: u32,
    pub id: String,
    pub instruction: String,
    pub category: TaskCategory,
    #[serde(default)]
    pub required_facts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_url: Option<String>,
    pub max_steps: u32,
}

impl TaskSpec {
    pub fn validate_against(&self, site: &SiteGraph) -> Result<(), EnvError> {
        if self.schema_version != TASK_SCHEMA_VERSION {
            return Err(EnvError::Fixture(format!(
                "task `{}`: unsupported schema_version {}",
                self.id, self.schema_version
            )));
        }
        if self.id.is_empty() || self.instruction.is_empty() {
            return Err(EnvError::Fixture("task id and instruction must be non-empty".to_string()));
        }
        if self.required_facts.is_empty() && self.target_url.is_none() {
            return Err(EnvError::Fixture(format!(
                "task `{}` needs required facts or a target url",
                self.id
            )));
        }
        if self.max_steps == 0 {
            return Err(EnvError::Fixture(format!("task `{}`: max_steps must be positive", self.id)));
        }
        if let Some(t) = &self.target_url {
            if !site.pages.contains_key(t) {
                return Err(EnvError::Fixture(format!(
                    "task `{}` targets unknown page `{t}`",
                    self.id
                )));
            }
        }
        for f in &self.required_facts {
            if site.fact_value(f).is_none() {
                return Err(EnvError::Fixture(format!(
                    "task `{}` requires fact `{f}` not present in the site",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tab {
    pub url: String,
    pub viewport_start: usize,
    pub history: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoneRecord {
    pub text: String,
    pub success: bool,
    pub files_to_display: Vec<String>,
}

/// Full mutable episode state. Serializable so an episode can be frozen to a
/// file and resumed action by action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub tabs: Vec<Tab>,
    pub active_tab: usize,
    /// Typed text and dropdown selections, keyed `"{position}:{url}"`.
    pub input_values: BTreeMap<String, String>,
    pub virtual_files: BTreeMap<String, String>,
    pub extract_counter: u32,
    /// Focused element as `"{position}:{url}"`, the target of a later Enter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focused: Option<String>,
    pub clock_seconds: i64,
    pub step_counter: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminated: Option<DoneRecord>,
}

fn slot_key(url: &str, position: usize) -> String {
    format!("{position}:{url}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub success: bool,
    pub message: String,
}

impl ActionOutcome {
    fn ok(message: impl Into<String>) -> Self {
        ActionOutcome { success: true, message: message.into() }
    }
    fn fail(message: impl Into<String>) -> Self {
        ActionOutcome { success: false, message: message.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    /// A final report was emitted within the step budget.
    pub completed: bool,
    /// Completed, reported success, all required fact values token-contained
    /// in the report, and the episode ended on the target page when one is
    /// set.
    pub success: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
}

/// One running episode: a site, a task, and the mutable state between them.
#[derive(Clone)]
pub struct Simulator<'s> {
    pub site: &'s SiteGraph,
    pub task: &'s TaskSpec,
    pub state: EnvState,
}

impl<'s> Simulator<'s> {
    pub fn reset(site: &'s SiteGraph, task: &'s TaskSpec) -> Simulator<'s> {
        Simulator {
            site,
            task,
            state: EnvState {
                tabs: vec![Tab {
                    url: site.start_url.clone(),
                    viewport_start: 0,
                    history: Vec::new(),
                }],
                active_tab: 0,
                input_values: BTreeMap::new(),
                virtual_files: BTreeMap::new(),
                extract_counter: 0,
                focused: None,
                clock_seconds: 0,
                step_counter: 0,
                terminated: None,
            },
        }
    }

    pub fn from_state(site: &'s SiteGraph, task: &'s TaskSpec, state: EnvState) -> Simulator<'s> {
        Simulator { site, task, state }
    }

    fn tab(&self) -> &Tab {
        &self.state.tabs[self.state.active_tab]
    }

    fn tab_mut(&mut self) -> &mut Tab {
        let i = self.state.active_tab;
        &mut self.state.tabs[i]
    }

    fn page(&self) -> &Page {
        &self.site.pages[&self.tab().url]
    }

    fn max_viewport_start(&self) -> usize {
        self.page().elements.len().saturating_sub(self.site.viewport_size)
    }

    /// Positions of elements currently inside the viewport window.
    fn window(&self) -> std::ops::Range<usize> {
        let start = self.tab().viewport_start;
        let end = (start + self.site.viewport_size).min(self.page().elements.len());
        start..end
    }

    /// Maps a visible interactive index to its page position.
    fn resolve_index(&self, index: i64) -> Option<usize> {
        let mut next = 0i64;
        for pos in self.window() {
            if self.page().elements[pos].is_interactive() {
                if next == index {
                    return Some(pos);
                }
                next += 1;
            }
        }
        None
    }

    fn navigate(&mut self, to: &str) {
        let tab = self.tab_mut();
        let from = std::mem::replace(&mut tab.url, to.to_string());
        tab.history.push(from);
        tab.viewport_start = 0;
        self.state.focused = None;
    }

    /// Renders the active tab. Elements beyond the viewport window are
    /// present but not interactive and carry index -1; visible interactive
    /// elements are numbered contiguously from 0 in document order.
    pub fn observe(&self) -> DomSnapshot {
        let tab = self.tab();
        let page = self.page();
        let window = self.window();
        let mut next_index = 0i64;
        let elements = page
            .elements
            .iter()
            .enumerate()
            .map(|(pos, el)| {
                let visible = window.contains(&pos);
                let interactive = visible && el.is_interactive();
                let index = if interactive {
                    let i = next_index;
                    next_index += 1;
                    i
                } else {
                    -1
                };
                let mut attrs = BTreeMap::new();
                match el {
                    PageElement::Link { target, .. } => {
                        attrs.insert("href".to_string(), target.clone());
                    }
                    PageElement::Dropdown { options, .. } => {
                        attrs.insert("options".to_string(), options.join("|"));
                    }
                    _ => {}
                }
                if el.is_interactive() {
                    if let Some(v) = self.state.input_values.get(&slot_key(&tab.url, pos)) {
                        attrs.insert("value".to_string(), v.clone());
                    }
                }
                let tag = match el {
                    PageElement::Text { .. } => "p",
                    PageElement::Link { .. } => "a",
                    PageElement::Button { .. } => "button",
                    PageElement::Input { .. } => "input",
                    PageElement::Dropdown { .. } => "select",
                };
                DomElement {
                    index,
                    tag: tag.to_string(),
                    text: el.text().to_string(),
                    interactive,
                    attrs,
                }
            })
            .collect();
        DomSnapshot {
            url: tab.url.clone(),
            elements,
            viewport_start: tab.viewport_start as u32,
            tab_ids: (0..self.state.tabs.len() as u32).collect(),
            history_depth: tab.history.len() as u32,
        }
    }

    /// Applies one agent turn. Each action yields an outcome in order; a
    /// `done` terminates the episode and every action after it in the same
    /// list fails. Failed actions leave the state unchanged.
    pub fn step(&mut self, actions: &[Action]) -> Result<Vec<ActionOutcome>, EnvError> {
        if self.state.terminated.is_some() {
            return Err(EnvError::AlreadyTerminated);
        }
        self.state.step_counter += 1;
        let mut outcomes = Vec::with_capacity(actions.len());
        for action in actions {
            if self.state.terminated.is_some() {
                outcomes.push(ActionOutcome::fail("episode already terminated"));
                continue;
            }
            outcomes.push(self.apply(action));
        }
        Ok(outcomes)
    }

    fn apply(&mut self, action: &Action) -> ActionOutcome {
        match action {
            Action::SearchGoogle { query } => self.apply_search(query),
            Action::Done { text, success, files_to_display } => {
                self.state.terminated = Some(DoneRecord {
                    text: text.clone(),
                    success: *success,
                    files_to_display: files_to_display.clone(),
                });
                ActionOutcome::ok("episode terminated")
            }
            Action::ClickElementByIndex { index, .. } => self.apply_click(*index),
            Action::Scroll { down, num_pages, .. } => self.apply_scroll(*down, *num_pages),
            Action::SwitchTab { page_id } => {
                let id = *page_id as usize;
                if id < self.state.tabs.len() {
                    self.state.active_tab = id;
                    self.state.focused = None;
                    ActionOutcome::ok(format!("switched to tab {id}"))
                } else {
                    ActionOutcome::fail(format!("no tab {id}"))
                }
            }
            Action::GoBack => {
                let tab = self.tab_mut();
                match tab.history.pop() {
                    Some(prev) => {
                        tab.url = prev.clone();
                        tab.viewport_start = 0;
                        self.state.focused = None;
                        ActionOutcome::ok(format!("went back to {prev}"))
                    }
                    None => ActionOutcome::fail("history is empty"),
                }
            }
            Action::ExtractStructuredData { query, extract_links } => {
                self.apply_extract(query, *extract_links)
            }
            Action::InputText { index, text } => match self.resolve_index(*index) {
                Some(pos) => {
                    let url = self.tab().url.clone();
                    if matches!(self.page().elements[pos], PageElement::Input { .. }) {
                        let key = slot_key(&url, pos);
                        self.state.input_values.insert(key.clone(), text.clone());
                        self.state.focused = Some(key);
                        ActionOutcome::ok(format!("typed into element {index}"))
                    } else {
                        ActionOutcome::fail(format!("element {index} is not an input"))
                    }
                }
                None => ActionOutcome::fail(format!("unknown or out-of-view index {index}")),
            },
            Action::Refresh => {
                let url = self.tab().url.clone();
                let prefixes: Vec<String> = self
                    .state
                    .input_values
                    .keys()
                    .filter(|k| k.ends_with(&format!(":{url}")))
                    .cloned()
                    .collect();
                for k in prefixes {
                    self.state.input_values.remove(&k);
                }
                self.tab_mut().viewport_start = 0;
                self.state.focused = None;
                ActionOutcome::ok("page refreshed")
            }
            Action::Wait { seconds } => {
                self.state.clock_seconds += *seconds;
                ActionOutcome::ok(format!("waited {seconds}s"))
            }
            Action::ScrollToText { text } => {
                let needle = text.to_lowercase();
                let found = self
                    .page()
                    .elements
                    .iter()
                    .position(|el| el.text().to_lowercase().contains(&needle));
                match found {
                    Some(pos) => {
                        let start = pos.min(self.max_viewport_start());
                        self.tab_mut().viewport_start = start;
                        ActionOutcome::ok(format!("scrolled to `{text}`"))
                    }
                    None => ActionOutcome::fail(format!("text `{text}` not found")),
                }
            }
            Action::GoToUrl { url, new_tab } => {
                if !self.site.pages.contains_key(url) {
                    return ActionOutcome::fail(format!("navigation error: unknown url {url}"));
                }
                if *new_tab {
                    self.state.tabs.push(Tab {
                        url: url.clone(),
                        viewport_start: 0,
                        history: Vec::new(),
                    });
                    self.state.active_tab = self.state.tabs.len() - 1;
                    self.state.focused = None;
                } else {
                    self.navigate(url);
                }
                ActionOutcome::ok(format!("opened {url}"))
            }
            Action::ReadFile { file_name } => match self.state.virtual_files.get(file_name) {
                Some(content) => ActionOutcome::ok(content.clone()),
                None => ActionOutcome::fail(format!("no file named `{file_name}`")),
            },
            Action::SendKeys { keys } => {
                if keys == "Enter" {
                    let Some(focus) = self.state.focused.clone() else {
                        return ActionOutcome::fail("nothing focused to submit");
                    };
                    let (pos, url) = match focus.split_once(':') {
                        Some((p, u)) => (p.parse::<usize>().ok(), u.to_string()),
                        None => (None, String::new()),
                    };
                    if url != self.tab().url {
                        return ActionOutcome::fail("focused element is not on this page");
                    }
                    let submit = pos.and_then(|p| self.page().elements.get(p)).and_then(|el| {
                        match el {
                            PageElement::Input { submit, .. } => submit.clone(),
                            _ => None,
                        }
                    });
                    match submit {
                        Some(target) => {
                            self.navigate(&target);
                            ActionOutcome::ok(format!("submitted, now at {target}"))
                        }
                        None => ActionOutcome::fail("focused element does not submit"),
                    }
                } else {
                    ActionOutcome::ok(format!("sent keys `{keys}`"))
                }
            }
            Action::SelectDropdownOption { index, text } => match self.resolve_index(*index) {
                Some(pos) => {
                    let url = self.tab().url.clone();
                    match &self.page().elements[pos] {
                        PageElement::Dropdown { options, .. } => {
                            if options.iter().any(|o| o == text) {
                                self.state
                                    .input_values
                                    .insert(slot_key(&url, pos), text.clone());
                                ActionOutcome::ok(format!("selected `{text}`"))
                            } else {
                                ActionOutcome::fail(format!("no option `{text}`"))
                            }
                        }
                        _ => ActionOutcome::fail(format!("element {index} is not a dropdown")),
                    }
                }
                None => ActionOutcome::fail(format!("unknown or out-of-view index {index}")),
            },
        }
    }

    fn apply_search(&mut self, query: &str) -> ActionOutcome {
        let q = norm_tokens(query);
        let mut best: Option<(&String, &Vec<String>)> = None;
        let mut best_overlap = 0usize;
        for (key, urls) in &self.site.search_index {
            let overlap = norm_tokens(key).intersection(&q).count();
            if overlap > best_overlap {
                best_overlap = overlap;
                best = Some((key, urls));
            }
        }
        match best {
            Some((_, urls)) => {
                let target = urls[0].clone();
                self.navigate(&target);
                ActionOutcome::ok(format!("search result: {target}"))
            }
            None => ActionOutcome::fail(format!("no results for `{query}`")),
        }
    }

    fn apply_click(&mut self, index: i64) -> ActionOutcome {
        let Some(pos) = self.resolve_index(index) else {
            return ActionOutcome::fail(format!("unknown or out-of-view index {index}"));
        };
        let url = self.tab().url.clone();
        match self.page().elements[pos].clone() {
            PageElement::Link { target, .. } | PageElement::Button { target, .. } => {
                self.navigate(&target);
                ActionOutcome::ok(format!("navigated to {target}"))
            }
            PageElement::Input { .. } | PageElement::Dropdown { .. } => {
                self.state.focused = Some(slot_key(&url, pos));
                ActionOutcome::ok(format!("focused element {index}"))
            }
            PageElement::Text { .. } => unreachable!("text elements are never interactive"),
        }
    }

    fn apply_scroll(&mut self, down: bool, num_pages: f64) -> ActionOutcome {
        let shift = ((num_pages * self.site.viewport_size as f64).round() as i64).max(1);
        let start = self.tab().viewport_start as i64;
        let max = self.max_viewport_start() as i64;
        let target = if down { start + shift } else { start - shift }.clamp(0, max);
        if target == start {
            return ActionOutcome::fail("viewport did not move");
        }
        self.tab_mut().viewport_start = target as usize;
        ActionOutcome::ok(format!("viewport now at element {target}"))
    }

    fn apply_extract(&mut self, query: &str, extract_links: bool) -> ActionOutcome {
        let q = norm_tokens(query);
        let page = self.page();
        let mut lines: Vec<String> = page
            .facts
            .iter()
            .filter(|(key, _)| norm_tokens(key).intersection(&q).count() > 0)
            .map(|(key, value)| format!("{key}: {value}"))
            .collect();
        if extract_links {
            for el in &page.elements {
                if let PageElement::Link { text, target } = el {
                    lines.push(format!("link {text} -> {target}"));
                }
            }
        }
        if lines.is_empty() {
            return ActionOutcome::fail(format!("nothing matched `{query}`"));
        }
        let content = lines.join("\n");
        let name = format!("extract_{}", self.state.extract_counter);
        self.state.extract_counter += 1;
        self.state.virtual_files.insert(name.clone(), content.clone());
        ActionOutcome::ok(format!("saved {name}:\n{content}"))
    }

    /// Task verdict for the current state.
    pub fn judge(&self) -> Judgement {
        let mut reasons = Vec::new();
        let done = match &self.state.terminated {
            Some(d) => d,
            None => {
                return Judgement {
                    completed: false,
                    success: false,
                    reasons: vec!["no final report was emitted".to_string()],
                }
            }
        };
        let completed = self.state.step_counter <= self.task.max_steps;
        if !completed {
            reasons.push(format!(
                "finished after {} steps, budget {}",
                self.state.step_counter, self.task.max_steps
            ));
        }
        if !done.success {
            reasons.push("final report declared failure".to_string());
        }
        for key in &self.task.required_facts {
            let value = self.site.fact_value(key).unwrap_or_default();
            if !tokens_contained(value, &done.text) {
                reasons.push(format!("fact `{key}` missing from the final report"));
            }
        }
        if let Some(target) = &self.task.target_url {
            if &self.tab().url != target {
                reasons.push(format!("episode ended on {}, expected {target}", self.tab().url));
            }
        }
        Judgement { completed, success: completed && reasons.is_empty(), reasons }
    }
}

/// Tokens for matching queries against fact keys and index entries:
/// underscores widen to spaces, comparison is case-folded, duplicates
/// collapse.
fn norm_tokens(s: &str) -> BTreeSet<String> {
    s.replace('_', " ")
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn load_site(path: impl AsRef<Path>) -> Result<SiteGraph, EnvError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| EnvError::Io { path: path.display().to_string(), source })?;
    site_from_str(&text)
}

pub fn site_from_str(text: &str) -> Result<SiteGraph, EnvError> {
    let site: SiteGraph =
        serde_json::from_str(text).map_err(|e| EnvError::Fixture(e.to_string()))?;
    site.validate()?;
    Ok(site)
}

/// Canonical site rendering; `load_site` of the output reproduces the value
/// and re-saving reproduces the bytes.
pub fn site_to_string(site: &SiteGraph) -> String {
    let mut s = serde_json::to_string_pretty(site).expect("site encodes");
    s.push('\n');
    s
}

pub fn save_site(path: impl AsRef<Path>, site: &SiteGraph) -> Result<(), EnvError> {
    let path = path.as_ref();
    std::fs::write(path, site_to_string(site))
        .map_err(|source| EnvError::Io { path: path.display().to_string(), source })
}

pub fn tasks_from_str(text: &str) -> Result<Vec<TaskSpec>, EnvError> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let task: TaskSpec = serde_json::from_str(line)
            .map_err(|e| EnvError::Fixture(format!("line {}: {e}", i + 1)))?;
        if !ids.insert(task.id.clone()) {
            return Err(EnvError::Fixture(format!("line {}: duplicate task id `{}`", i + 1, task.id)));
        }
        out.push(task);
    }
    Ok(out)
}

pub fn tasks_to_string(tasks: &[TaskSpec]) -> String {
    let mut s = String::new();
    for t in tasks {
        s.push_str(&serde_json::to_string(t).expect("task encodes"));
        s.push('\n');
    }
    s
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskSpec>, EnvError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| EnvError::Io { path: path.display().to_string(), source })?;
    tasks_from_str(&text)
}

pub fn save_tasks(path: impl AsRef<Path>, tasks: &[TaskSpec]) -> Result<(), EnvError> {
    let path = path.as_ref();
    std::fs::write(path, tasks_to_string(tasks))
        .map_err(|source| EnvError::Io { path: path.display().to_string(), source })
}

/// Abstract state key for search: everything that determines future
/// observable behavior except the clock and step counter.
fn abstract_key(sim: &Simulator) -> String {
    let s = &sim.state;
    let tabs: Vec<String> = s
        .tabs
        .iter()
        .map(|t| format!("{}@{}#{}", t.url, t.viewport_start, t.history.len()))
        .collect();
    let inputs: Vec<String> =
        s.input_values.iter().map(|(k, v)| format!("{k}={v}")).collect();
    // File names encode the extract counter; two episodes that extracted the
    // same content in a different order know the same things, so the key
    // uses the deduplicated content set.
    let files: Vec<String> = s
        .virtual_files
        .values()
        .cloned()
        .collect::<BTreeSet<String>>()
        .into_iter()
        .collect();
    format!(
        "{}|{}|{}|{}|{:?}",
        tabs.join(","),
        s.active_tab,
        inputs.join(","),
        files.join(","),
        s.focused
    )
}

/// True when the fact key has already been extracted into a virtual file
/// during this episode.
fn fact_extracted(sim: &Simulator, key: &str) -> bool {
    let prefix = format!("{key}:");
    sim.state
        .virtual_files
        .values()
        .any(|content| content.lines().any(|l| l.starts_with(&prefix)))
}

fn facts_extracted(sim: &Simulator) -> bool {
    sim.task.required_facts.iter().all(|key| fact_extracted(sim, key))
}

/// The report the reference agent files once it holds all required facts.
pub fn oracle_done_text(site: &SiteGraph, task: &TaskSpec) -> String {
    if task.required_facts.is_empty() {
        return format!("reached {}", task.target_url.as_deref().unwrap_or("the goal"));
    }
    // One fact per line; punctuation between facts would fuse with value
    // tokens and break whitespace-token containment.
    task.required_facts
        .iter()
        .map(|key| format!("{key}: {}", site.fact_value(key).unwrap_or_default()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Candidate actions explored by the oracle from the current state, in fixed
/// order. The alphabet is finite on purpose: index clicks, unit scrolls,
/// back, task-derived extract queries, indexed searches, typing a visible
/// input's own placeholder, Enter, dropdown selections, and an honest `done`
/// only once every required fact has been extracted and any target page
/// reached.
fn oracle_candidates(sim: &Simulator) -> Vec<Action> {
    let mut out = Vec::new();
    let snapshot = sim.observe();

    let on_target = match &sim.task.target_url {
        Some(t) => &sim.tab().url == t,
        None => true,
    };
    if on_target && facts_extracted(sim) {
        out.push(Action::Done {
            text: oracle_done_text(sim.site, sim.task),
            success: true,
            files_to_display: vec![],
        });
    }

    for key in &sim.task.required_facts {
        if !fact_extracted(sim, key) {
            out.push(Action::ExtractStructuredData {
                query: key.replace('_', " "),
                extract_links: false,
            });
        }
    }

    for el in snapshot.elements.iter().filter(|e| e.interactive) {
        match el.tag.as_str() {
            "a" | "button" => {
                out.push(Action::ClickElementByIndex { index: el.index, delay: None })
            }
            "input" => {
                out.push(Action::InputText { index: el.index, text: el.text.clone() });
            }
            "select" => {
                if let Some(options) = el.attrs.get("options") {
                    for opt in options.split('|') {
                        out.push(Action::SelectDropdownOption {
                            index: el.index,
                            text: opt.to_string(),
                        });
                    }
                }
            }
            _ => {}
        }
    }

    out.push(Action::SendKeys { keys: "Enter".into() });
    out.push(Action::Scroll { down: true, num_pages: 1.0, index: None });
    out.push(Action::Scroll { down: false, num_pages: 1.0, index: None });
    out.push(Action::GoBack);

    for key in sim.site.search_index.keys() {
        out.push(Action::SearchGoogle { query: key.clone() });
    }

    out
}

/// Breadth-first search for a minimal successful action sequence, one action
/// per step, over the candidate alphabet of [`oracle_candidates`]. Returns
/// `NoSolution` when the task cannot be finished within its step budget.
pub fn oracle_trajectory(site: &SiteGraph, task: &TaskSpec) -> Result<Vec<Action>, EnvError> {
    task.validate_against(site)?;
    let init = Simulator::reset(site, task);
    let mut visited: BTreeSet<String> = BTreeSet::new();
    visited.insert(abstract_key(&init));
    let mut queue: VecDeque<(Simulator, Vec<Action>)> = VecDeque::new();
    queue.push_back((init, Vec::new()));

    while let Some((sim, path)) = queue.pop_front() {
        if path.len() as u32 >= task.max_steps {
            continue;
        }
        for action in oracle_candidates(&sim) {
            let mut next = sim.clone();
            let outcomes = next.step(std::slice::from_ref(&action))?;
            if !outcomes[0].success {
                continue;
            }
            let mut next_path = path.clone();
            next_path.push(action);
            if next.state.terminated.is_some() {
                if next.judge().success {
                    return Ok(next_path);
                }
                continue;
            }
            if visited.insert(abstract_key(&next)) {
                queue.push_back((next, next_path));
            }
        }
    }
    Err(EnvError::NoSolution { task: task.id.clone(), max_steps: task.max_steps })
}

/// Wraps an action sequence into full structured responses, one action per
/// turn, suitable as gold data.
pub fn wrap_oracle_actions(task: &TaskSpec, actions: &[Action]) -> Vec<AgentResponse> {
    let n = actions.len();
    actions
        .iter()
        .enumerate()
        .map(|(i, action)| AgentResponse {
            think: format!("reference plan, step {} of {n}", i + 1),
            evaluation_previous_goal: if i == 0 {
                "Success - episode start".to_string()
            } else {
                "Success - previous action applied".to_string()
            },
            memory: format!("task {}", task.id),
            next_goal: format!("run {}", action.tool_name()),
            action: vec![action.clone()],
        })
        .collect()
}

/// [`oracle_trajectory`] wrapped by [`wrap_oracle_actions`].
pub fn oracle_responses(site: &SiteGraph, task: &TaskSpec) -> Result<Vec<AgentResponse>, EnvError> {
    let actions = oracle_trajectory(site, task)?;
    Ok(wrap_oracle_actions(task, &actions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::canonical_action_list;
    use proptest::prelude::*;

    fn demo_site() -> SiteGraph {
        let mut pages = IndexMap::new();
        pages.insert(
            "https://start.example/".to_string(),
            Page {
                elements: vec![
                    PageElement::Text { text: "Welcome to the registry portal".into() },
                    PageElement::Link {
                        text: "Company records".into(),
                        target: "https://records.example/".into(),
                    },
                    PageElement::Input {
                        text: "lookup box".into(),
                        submit: Some("https://records.example/".into()),
                    },
                    PageElement::Dropdown {
                        text: "region".into(),
                        options: vec!["UK".into(), "DE".into()],
                    },
                ],
                facts: BTreeMap::from([(
                    "portal_name".to_string(),
                    "Registry Portal".to_string(),
                )]),
            },
        );
        pages.insert(
            "https://records.example/".to_string(),
            Page {
                elements: vec![
                    PageElement::Text { text: "Acme Trading Ltd".into() },
                    PageElement::Text { text: "filler one".into() },
                    PageElement::Text { text: "filler two".into() },
                    PageElement::Text { text: "filler three".into() },
                    PageElement::Link {
                        text: "owner page".into(),
                        target: "https://owner.example/".into(),
                    },
                ],
                facts: BTreeMap::from([(
                    "registration_number".to_string(),
                    "RC-4417-88".to_string(),
                )]),
            },
        );
        pages.insert(
            "https://owner.example/".to_string(),
            Page {
                elements: vec![PageElement::Text { text: "owned by J. Doe Holdings".into() }],
                facts: BTreeMap::from([("owner_name".to_string(), "J. Doe Holdings".to_string())]),
            },
        );
        let mut search_index = IndexMap::new();
        search_index.insert(
            "acme registration records".to_string(),
            vec!["https://records.example/".to_string()],
        );
        SiteGraph {
            schema_version: 1,
            start_url: "https://start.example/".into(),
            viewport_size: 4,
            pages,
            search_index,
        }
    }

    fn fact_task(id: &str, keys: &[&str]) -> TaskSpec {
        TaskSpec {
            schema_version: 1,
            id: id.into(),
            instruction: format!("find {}", keys.join(" and ")),
            category: TaskCategory::InfoSearch,
            required_facts: keys.iter().map(|s| s.to_string()).collect(),
            target_url: None,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    #[test]
    fn site_round_trip_is_byte_identical() {
        let site = demo_site();
        let text = site_to_string(&site);
        let back = site_from_str(&text).unwrap();
        assert_eq!(back, site);
        assert_eq!(site_to_string(&back), text);
    }

    #[test]
    fn validation_rejects_dangling_targets() {
        let mut site = demo_site();
        site.pages[1].elements.push(PageElement::Link {
            text: "broken".into(),
            target: "https://missing.example/".into(),
        });
        assert!(matches!(site.validate(), Err(EnvError::Fixture(_))));
    }

    #[test]
    fn reset_shows_first_window_with_contiguous_indices() {
        let site = demo_site();
        let task = fact_task("t", &["portal_name"]);
        let sim = Simulator::reset(&site, &task);
        let snap = sim.observe();
        snap.validate().unwrap();
        assert_eq!(snap.url, site.start_url);
        assert_eq!(snap.viewport_start, 0);
        let indices: Vec<i64> =
            snap.elements.iter().filter(|e| e.interactive).map(|e| e.index).collect();
        assert_eq!(indices, vec![0, 1, 2]);
    }

    #[test]
    fn click_navigates_and_back_returns() {
        let site = demo_site();
        let task = fact_task("t", &["registration_number"]);
        let mut sim = Simulator::reset(&site, &task);
        let out = sim
            .step(&[Action::ClickElementByIndex { index: 0, delay: None }])
            .unwrap();
        assert!(out[0].success);
        assert_eq!(sim.observe().url, "https://records.example/");
        assert_eq!(sim.observe().history_depth, 1);

        let out = sim.step(&[Action::GoBack]).unwrap();
        assert!(out[0].success);
        assert_eq!(sim.observe().url, "https://start.example/");

        let out = sim.step(&[Action::GoBack]).unwrap();
        assert!(!out[0].success);
    }

    #[test]
    fn failed_actions_leave_state_unchanged_except_counter() {
        let site = demo_site();
        let task = fact_task("t", &["portal_name"]);
        let mut sim = Simulator::reset(&site, &task);
        let before = sim.state.clone();
        let out = sim
            .step(&[Action::ClickElementByIndex { index: 9, delay: None }])
            .unwrap();
        assert!(!out[0].success);
        let mut after = sim.state.clone();
        assert_eq!(after.step_counter, before.step_counter + 1);
        after.step_counter = before.step_counter;
        assert_eq!(after, before);
    }

    #[test]
    fn deep_elements_need_scroll_before_click() {
        let site = demo_site();
        let task = fact_task("t", &["owner_name"]);
        let mut sim = Simulator::reset(&site, &task);
        sim.step(&[Action::ClickElementByIndex { index: 0, delay: None }]).unwrap();
        assert_eq!(sim.observe().url, "https://records.example/");
        // The owner link is the fifth element; window is four wide.
        assert!(sim.observe().elements.iter().all(|e| !e.interactive));
        let out = sim
            .step(&[Action::Scroll { down: true, num_pages: 1.0, index: None }])
            .unwrap();
        assert!(out[0].success);
        let snap = sim.observe();
        let link = snap.elements.iter().find(|e| e.interactive).unwrap();
        assert_eq!(link.text, "owner page");
        let out = sim
            .step(&[Action::ClickElementByIndex { index: link.index, delay: None }])
            .unwrap();
        assert!(out[0].success);
        assert_eq!(sim.observe().url, "https://owner.example/");
    }

    #[test]
    fn scroll_at_edge_fails() {
        let site = demo_site();
        let task = fact_task("t", &["portal_name"]);
        let mut sim = Simulator::reset(&site, &task);
        let out = sim
            .step(&[Action::Scroll { down: false, num_pages: 1.0, index: None }])
            .unwrap();
        assert!(!out[0].success);
    }

    #[test]
    fn extract_then_read_file_round_trips_content() {
        let site = demo_site();
        let task = fact_task("t", &["portal_name"]);
        let mut sim = Simulator::reset(&site, &task);
        let out = sim
            .step(&[Action::ExtractStructuredData {
                query: "portal name".into(),
                extract_links: false,
            }])
            .unwrap();
        assert!(out[0].success, "{out:?}");
        let out = sim.step(&[Action::ReadFile { file_name: "extract_0".into() }]).unwrap();
        assert!(out[0].success);
        assert_eq!(out[0].message, "portal_name: Registry Portal");

        let out = sim
            .step(&[Action::ExtractStructuredData {
                query: "unrelated nonsense".into(),
                extract_links: false,
            }])
            .unwrap();
        assert!(!out[0].success);
    }

    #[test]
    fn typing_and_enter_submits() {
        let site = demo_site();
        let task = fact_task("t", &["registration_number"]);
        let mut sim = Simulator::reset(&site, &task);
        let out = sim
            .step(&[
                Action::InputText { index: 1, text: "acme".into() },
                Action::SendKeys { keys: "Enter".into() },
            ])
            .unwrap();
        assert!(out[0].success && out[1].success, "{out:?}");
        assert_eq!(sim.observe().url, "https://records.example/");

        // Enter with nothing focused fails.
        let mut fresh = Simulator::reset(&site, &task);
        let out = fresh.step(&[Action::SendKeys { keys: "Enter".into() }]).unwrap();
        assert!(!out[0].success);
    }

    #[test]
    fn dropdown_selection_validates_options() {
        let site = demo_site();
        let task = fact_task("t", &["portal_name"]);
        let mut sim = Simulator::reset(&site, &task);
        let ok = sim
            .step(&[Action::SelectDropdownOption { index: 2, text: "DE".into() }])
            .unwrap();
        assert!(ok[0].success);
        let bad = sim
            .step(&[Action::SelectDropdownOption { index: 2, text: "FR".into() }])
            .unwrap();
        assert!(!bad[0].success);
    }

    #[test]
    fn done_terminates_and_discards_the_rest_of_the_list() {
        let site = demo_site();
        let task = fact_task("t", &["portal_name"]);
        let mut sim = Simulator::reset(&site, &task);
        let out = sim
            .step(&[
                Action::Done { text: "Registry Portal".into(), success: true, files_to_display: vec![] },
                Action::GoBack,
            ])
            .unwrap();
        assert!(out[0].success);
        assert!(!out[1].success);
        assert!(matches!(sim.step(&[Action::GoBack]), Err(EnvError::AlreadyTerminated)));
    }

    #[test]
    fn judge_checks_facts_report_flag_and_target() {
        let site = demo_site();
        let mut task = fact_task("t", &["registration_number"]);
        task.target_url = Some("https://records.example/".into());

        let mut sim = Simulator::reset(&site, &task);
        sim.step(&[Action::ClickElementByIndex { index: 0, delay: None }]).unwrap();
        sim.step(&[Action::Done {
            text: "the number is rc-4417-88".into(),
            success: true,
            files_to_display: vec![],
        }])
        .unwrap();
        let j = sim.judge();
        assert!(j.completed && j.success, "{j:?}");

        // Same episode but the report omits the fact value.
        let mut sim = Simulator::reset(&site, &task);
        sim.step(&[Action::ClickElementByIndex { index: 0, delay: None }]).unwrap();
        sim.step(&[Action::Done { text: "done".into(), success: true, files_to_display: vec![] }])
            .unwrap();
        let j = sim.judge();
        assert!(j.completed && !j.success);

        // Right text, wrong final page.
        let mut sim = Simulator::reset(&site, &task);
        sim.step(&[Action::Done {
            text: "RC-4417-88".into(),
            success: true,
            files_to_display: vec![],
        }])
        .unwrap();
        assert!(!sim.judge().success);

        // Over budget: completed is false even though done was emitted.
        let mut short = task.clone();
        short.max_steps = 1;
        let mut sim = Simulator::reset(&site, &short);
        sim.step(&[Action::ClickElementByIndex { index: 0, delay: None }]).unwrap();
        sim.step(&[Action::Done {
            text: "RC-4417-88".into(),
            success: true,
            files_to_display: vec![],
        }])
        .unwrap();
        let j = sim.judge();
        assert!(!j.completed && !j.success);
    }

    #[test]
    fn oracle_solves_start_page_fact_in_two_steps() {
        let site = demo_site();
        let task = fact_task("t", &["portal_name"]);
        let path = oracle_trajectory(&site, &task).unwrap();
        assert_eq!(path.len(), 2, "{path:?}");
        assert!(matches!(path[0], Action::ExtractStructuredData { .. }));
        assert!(matches!(path[1], Action::Done { .. }));
    }

    #[test]
    fn oracle_replay_always_judges_successful() {
        let site = demo_site();
        for task in [
            fact_task("a", &["portal_name"]),
            fact_task("b", &["registration_number"]),
            fact_task("c", &["owner_name"]),
            fact_task("d", &["registration_number", "owner_name"]),
        ] {
            let path = oracle_trajectory(&site, &task).unwrap();
            let mut sim = Simulator::reset(&site, &task);
            for action in &path {
                let out = sim.step(std::slice::from_ref(action)).unwrap();
                assert!(out[0].success, "task {}: {out:?}", task.id);
            }
            let j = sim.judge();
            assert!(j.completed && j.success, "task {}: {j:?}", task.id);
            assert!(path.len() as u32 <= task.max_steps);
        }
    }

    #[test]
    fn oracle_uses_scroll_for_deep_links() {
        let site = demo_site();
        let task = fact_task("deep", &["owner_name"]);
        let path = oracle_trajectory(&site, &task).unwrap();
        let rendered = canonical_action_list(&path);
        assert!(rendered.contains("scroll{"), "{rendered}");
    }

    #[test]
    fn replaying_a_fixed_sequence_is_deterministic() {
        let site = demo_site();
        let task = fact_task("t", &["registration_number"]);
        let script = vec![
            vec![Action::SearchGoogle { query: "acme registration".into() }],
            vec![Action::ExtractStructuredData { query: "registration number".into(), extract_links: false }],
            vec![Action::Done { text: "RC-4417-88".into(), success: true, files_to_display: vec![] }],
        ];
        let run = |()| {
            let mut sim = Simulator::reset(&site, &task);
            let mut log = Vec::new();
            for step in &script {
                let out = sim.step(step).unwrap();
                log.push(serde_json::to_string(&(out, sim.observe())).unwrap());
            }
            (log, serde_json::to_string(&sim.state).unwrap())
        };
        assert_eq!(run(()), run(()));
    }

    fn arb_probe_action() -> impl Strategy<Value = Action> {
        prop_oneof![
            (0i64..6).prop_map(|index| Action::ClickElementByIndex { index, delay: None }),
            (proptest::bool::ANY, 1u32..8).prop_map(|(down, q)| Action::Scroll {
                down,
                num_pages: q as f64 * 0.5,
                index: None
            }),
            Just(Action::GoBack),
            Just(Action::Refresh),
            (0i64..4).prop_map(|page_id| Action::SwitchTab { page_id }),
            "[a-z ]{0,12}".prop_map(|query| Action::ExtractStructuredData {
                query,
                extract_links: false
            }),
            (0i64..6, "[a-z]{1,6}").prop_map(|(index, text)| Action::InputText { index, text }),
            Just(Action::SendKeys { keys: "Enter".into() }),
            "[a-z ]{0,10}".prop_map(|text| Action::ScrollToText { text }),
            Just(Action::Wait { seconds: 1 }),
        ]
    }

    proptest! {
        #[test]
        fn probing_never_breaks_invariants(actions in proptest::collection::vec(arb_probe_action(), 1..25)) {
            let site = demo_site();
            let task = fact_task("t", &["portal_name"]);
            let mut sim = Simulator::reset(&site, &task);
            for (i, a) in actions.iter().enumerate() {
                let before = sim.state.clone();
                let out = sim.step(std::slice::from_ref(a)).unwrap();
                prop_assert_eq!(sim.state.step_counter, i as u32 + 1);
                if !out[0].success {
                    let mut now = sim.state.clone();
                    now.step_counter = before.step_counter;
                    prop_assert_eq!(now, before);
                }
                sim.observe().validate().map_err(|e| TestCaseError::fail(e))?;
            }
        }
    }
}
