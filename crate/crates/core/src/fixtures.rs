//! Deterministic builders for every file shipped under `fixtures/`.
//!
//! The files are committed for inspection and for the command-line examples,
//! but their contents are defined here: `write_all` regenerates them, and a
//! test fails whenever a committed file drifts from its builder. That keeps
//! the corpus, the sites, and the gold benches in lockstep with the schema.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;

use crate::env::{
    oracle_responses, save_site, save_tasks, EnvError, Page, PageElement, SiteGraph, Simulator,
    TaskCategory, TaskSpec, SITE_SCHEMA_VERSION, TASK_SCHEMA_VERSION,
};
use crate::eval::{write_predictions, EvalError, Prediction};
use crate::grpo::{difficulty_from_path_len, env_samples};
use crate::model::{
    write_trajectories, Action, AgentResponse, Difficulty, DomElement, DomSnapshot, Kind,
    ModelError, Source, StepRecord, Trajectory,
};
use crate::parser::serialize_response;
use crate::pipeline::{chain_multistep, PipelineConfig};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("fixture: {0}")]
    Build(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Six-page company registry used by the examples, the training smoke runs,
/// and the oracle-closure checks. The archive link in the directory sits
/// past the viewport so at least one task exercises scrolling, and the
/// search index shortcuts keep some oracle paths short.
pub fn site_small() -> SiteGraph {
    let mut pages = IndexMap::new();
    pages.insert(
        "https://registry.test/home".to_string(),
        Page {
            elements: vec![
                PageElement::Text {
                    text: "Company registry: vetting records for online sellers".to_string(),
                },
                PageElement::Link {
                    text: "company directory".to_string(),
                    target: "https://registry.test/directory".to_string(),
                },
            ],
            facts: BTreeMap::new(),
        },
    );
    pages.insert(
        "https://registry.test/directory".to_string(),
        Page {
            elements: vec![
                PageElement::Text { text: "Listed companies".to_string() },
                PageElement::Link {
                    text: "Acme Exports profile".to_string(),
                    target: "https://registry.test/acme".to_string(),
                },
                PageElement::Link {
                    text: "Globex Trading profile".to_string(),
                    target: "https://registry.test/globex".to_string(),
                },
                PageElement::Text { text: "Records older than five years move to the archive.".to_string() },
                PageElement::Link {
                    text: "filing archive".to_string(),
                    target: "https://registry.test/archive".to_string(),
                },
            ],
            facts: BTreeMap::new(),
        },
    );
    pages.insert(
        "https://registry.test/acme".to_string(),
        Page {
            elements: vec![
                PageElement::Text { text: "Acme Exports, consumer electronics".to_string() },
                PageElement::Button {
                    text: "open filings".to_string(),
                    target: "https://registry.test/acme/filings".to_string(),
                },
            ],
            facts: BTreeMap::from([
                ("registration_number".to_string(), "RC-4417-88".to_string()),
                ("owner_name".to_string(), "J. Doe Holdings".to_string()),
            ]),
        },
    );
    pages.insert(
        "https://registry.test/acme/filings".to_string(),
        Page {
            elements: vec![
                PageElement::Text { text: "Compliance filings for Acme Exports".to_string() },
                PageElement::Link {
                    text: "back to profile".to_string(),
                    target: "https://registry.test/acme".to_string(),
                },
            ],
            facts: BTreeMap::from([
                ("ssl_status".to_string(), "valid".to_string()),
                ("payment_gateway".to_string(), "verified-escrow".to_string()),
            ]),
        },
    );
    pages.insert(
        "https://registry.test/globex".to_string(),
        Page {
            elements: vec![
                PageElement::Text { text: "Globex Trading, bulk commodities".to_string() },
                PageElement::Link {
                    text: "back to directory".to_string(),
                    target: "https://registry.test/directory".to_string(),
                },
            ],
            facts: BTreeMap::from([
                ("risk_flag".to_string(), "under review since February 2024".to_string()),
                ("broker_license".to_string(), "BL-0092".to_string()),
            ]),
        },
    );
    // The archive holds the oldest record on the site.
    pages.insert(
        "https://registry.test/archive".to_string(),
        Page {
            elements: vec![PageElement::Text {
                text: "Archived filings, 1998 onward".to_string(),
            }],
            facts: BTreeMap::from([(
                "oldest_filing".to_string(),
                "Acme Exports initial registration, 1998-03-14".to_string(),
            )]),
        },
    );
    let mut search_index = IndexMap::new();
    search_index.insert(
        "acme exports profile".to_string(),
        vec!["https://registry.test/acme".to_string()],
    );
    search_index.insert(
        "globex trading profile".to_string(),
        vec!["https://registry.test/globex".to_string()],
    );
    search_index.insert(
        "registry filing archive".to_string(),
        vec!["https://registry.test/archive".to_string()],
    );
    SiteGraph {
        schema_version: SITE_SCHEMA_VERSION,
        start_url: "https://registry.test/home".to_string(),
        viewport_size: 4,
        pages,
        search_index,
    }
}

fn task(
    id: &str,
    instruction: &str,
    category: TaskCategory,
    required_facts: &[&str],
    target_url: Option<&str>,
) -> TaskSpec {
    TaskSpec {
        schema_version: TASK_SCHEMA_VERSION,
        id: id.to_string(),
        instruction: instruction.to_string(),
        category,
        required_facts: required_facts.iter().map(|s| s.to_string()).collect(),
        target_url: target_url.map(|s| s.to_string()),
        max_steps: 20,
    }
}

/// Six tasks over [`site_small`], two per difficulty band by oracle path
/// length (2 / 3 / 5 steps).
pub fn tasks_small() -> Vec<TaskSpec> {
    vec![
        task(
            "reach-directory",
            "Open the company directory",
            TaskCategory::Verification,
            &[],
            Some("https://registry.test/directory"),
        ),
        task(
            "reach-globex",
            "Open the Globex Trading profile page",
            TaskCategory::Verification,
            &[],
            Some("https://registry.test/globex"),
        ),
        task(
            "find-registration",
            "Find the registration number of Acme Exports",
            TaskCategory::InfoSearch,
            &["registration_number"],
            None,
        ),
        task(
            "find-oldest-filing",
            "Find the oldest filing in the registry archive",
            TaskCategory::InfoSearch,
            &["oldest_filing"],
            None,
        ),
        task(
            "audit-acme",
            "Report the registration number and the ssl status of Acme Exports",
            TaskCategory::InfoSearch,
            &["registration_number", "ssl_status"],
            None,
        ),
        task(
            "cross-check-owners",
            "Report the owner of Acme Exports and the risk flag on Globex Trading",
            TaskCategory::InfoSearch,
            &["owner_name", "risk_flag"],
            None,
        ),
    ]
}

/// Two-page site for fast command-line smoke runs.
pub fn site_tiny() -> SiteGraph {
    let mut pages = IndexMap::new();
    pages.insert(
        "https://mini.test/home".to_string(),
        Page {
            elements: vec![
                PageElement::Text { text: "Service overview".to_string() },
                PageElement::Link {
                    text: "status page".to_string(),
                    target: "https://mini.test/status".to_string(),
                },
            ],
            facts: BTreeMap::new(),
        },
    );
    pages.insert(
        "https://mini.test/status".to_string(),
        Page {
            elements: vec![PageElement::Text { text: "All systems nominal".to_string() }],
            facts: BTreeMap::from([("service_state".to_string(), "operational".to_string())]),
        },
    );
    SiteGraph {
        schema_version: SITE_SCHEMA_VERSION,
        start_url: "https://mini.test/home".to_string(),
        viewport_size: 4,
        pages,
        search_index: IndexMap::new(),
    }
}

pub fn tasks_tiny() -> Vec<TaskSpec> {
    vec![
        task(
            "reach-status",
            "Open the status page",
            TaskCategory::Verification,
            &[],
            Some("https://mini.test/status"),
        ),
        task(
            "find-state",
            "Find the current service state",
            TaskCategory::InfoSearch,
            &["service_state"],
            None,
        ),
    ]
}

fn dom(url: &str, texts: &[&str]) -> DomSnapshot {
    DomSnapshot {
        url: url.to_string(),
        elements: texts
            .iter()
            .enumerate()
            .map(|(i, t)| DomElement {
                index: i as i64,
                tag: "a".to_string(),
                text: t.to_string(),
                interactive: true,
                attrs: BTreeMap::new(),
            })
            .collect(),
        viewport_start: 0,
        tab_ids: vec![0],
        history_depth: 0,
    }
}

fn resp(think: &str, eval: &str, goal: &str, actions: Vec<Action>) -> AgentResponse {
    AgentResponse {
        think: think.to_string(),
        evaluation_previous_goal: eval.to_string(),
        memory: "tracking the task".to_string(),
        next_goal: goal.to_string(),
        action: actions,
    }
}

fn raw_step(
    i: u32,
    n: u32,
    question: &str,
    shot: Option<&str>,
    url: &str,
    gold: Option<AgentResponse>,
) -> StepRecord {
    StepRecord {
        step_index: i,
        question: question.to_string(),
        screenshot_ref: shot.map(|s| s.to_string()),
        dom: dom(url, &["open directory", "open profile"]),
        gold,
        predicted: None,
        step_count: n,
    }
}

fn raw_traj(id: &str, kind: Kind, steps: Vec<StepRecord>) -> Trajectory {
    Trajectory { id: id.to_string(), kind, steps, difficulty: Difficulty::Ungraded, source: Source::Raw }
}

fn click(i: i64) -> Action {
    Action::ClickElementByIndex { index: i, delay: None }
}

fn done(text: &str, success: bool) -> Action {
    Action::Done { text: text.to_string(), success, files_to_display: vec![] }
}

/// Ten raw sessions, three of which the filter drops (one unsuccessful, one
/// with a missing gold, one malformed). The survivors exercise every other
/// stage: retry noise for cleaning, delimited exemplars for refinement, one
/// unbalanced span for flagging, screenshots and paraphrasable wording for
/// augmentation, and multi-step sessions for chaining.
pub fn raw_synthetic() -> Vec<Trajectory> {
    let url = "https://registry.test/directory";
    vec![
        raw_traj("acme-registration", Kind::MultiStep, vec![
            raw_step(1, 3, "Find the registration number of Acme Exports", Some("shot_001.png"), url,
                Some(resp("the directory lists the profile", "Success - directory open", "open the profile", vec![click(1)]))),
            raw_step(2, 3, "Find the registration number of Acme Exports", Some("shot_002.png"), "https://registry.test/acme",
                Some(resp("the number is on this page", "Success - profile open", "extract the number", vec![Action::ExtractStructuredData { query: "registration number".to_string(), extract_links: false }]))),
            raw_step(3, 3, "Find the registration number of Acme Exports", Some("shot_003.png"), "https://registry.test/acme",
                Some(resp("extraction saved the value", "Success - number extracted", "report", vec![done("registration_number: RC-4417-88", true)]))),
        ]),
        raw_traj("captcha-slider", Kind::MultiStep, vec![
            raw_step(1, 5, "Verify the payment gateway of the checkout page", None, url,
                Some(resp("a slider guards the page", "Success - page open", "move the slider", vec![click(2)]))),
            raw_step(2, 5, "Verify the payment gateway of the checkout page", None, url,
                Some(resp("try the slider again", "Failed - slider did not move", "move the slider", vec![click(2)]))),
            raw_step(3, 5, "Verify the payment gateway of the checkout page", None, url,
                Some(resp("slower drag this time", "Failed - slider did not move", "move the slider", vec![click(2)]))),
            raw_step(4, 5, "Verify the payment gateway of the checkout page", None, url,
                Some(resp("finally through", "Success - slider accepted", "read the gateway", vec![Action::ExtractStructuredData { query: "payment gateway".to_string(), extract_links: false }]))),
            raw_step(5, 5, "Verify the payment gateway of the checkout page", None, url,
                Some(resp("gateway recorded", "Success - gateway read", "report", vec![done("payment_gateway: verified-escrow", true)]))),
        ]),
        raw_traj("globex-vetting", Kind::MultiStep, vec![
            raw_step(1, 4, "Check the risk flag on the Globex Trading profile", None, url,
                Some(resp("the flag is below the fold", "Success - profile open", "scroll down", vec![Action::Scroll { down: true, num_pages: 1.0, index: None }]))),
            raw_step(2, 4, "Check the risk flag on the Globex Trading profile", None, url,
                Some(resp("still not visible", "Success - scrolled", "scroll down", vec![Action::Scroll { down: true, num_pages: 1.0, index: None }]))),
            raw_step(3, 4, "Check the risk flag on the Globex Trading profile", None, url,
                Some(resp("flag in view", "Success - scrolled", "extract the flag", vec![Action::ExtractStructuredData { query: "risk flag".to_string(), extract_links: false }]))),
            raw_step(4, 4, "Check the risk flag on the Globex Trading profile", None, url,
                Some(resp("flag extracted", "Success - flag read", "report", vec![done("risk_flag: under review since February 2024", true)]))),
        ]),
        raw_traj("refund-policy", Kind::MultiStep, vec![
            raw_step(1, 2, "<example>Q: where is the SLA? A: open the terms page</example> Find the refund policy of the store", None, url,
                Some(resp("terms hold the policy", "Success - store open", "open the terms", vec![click(0)]))),
            raw_step(2, 2, "Find the refund policy of the store", None, url,
                Some(resp("policy paragraph found", "Success - terms open", "report", vec![done("refunds accepted within 30 days", true)]))),
        ]),
        raw_traj("news-archive", Kind::MultiStep, vec![
            raw_step(1, 2, "<example>this span never closes. Find the latest press release", None, url,
                Some(resp("archive lists releases", "Success - archive open", "open newest", vec![click(0)]))),
            raw_step(2, 2, "Find the latest press release", None, url,
                Some(resp("newest release open", "Success - release open", "report", vec![done("released 2024-01-12", true)]))),
        ]),
        raw_traj("price-check", Kind::SingleStep, vec![
            raw_step(1, 1, "Verify the listed price of the flagship item", Some("shot_910.png"), url,
                Some(resp("price banner is visible", "Success - listing open", "report the price", vec![done("listed price is 49.90", true)]))),
        ]),
        raw_traj("owner-lookup", Kind::MultiStep, vec![
            raw_step(1, 3, "Find the owner of Acme Exports", None, url,
                Some(resp("profile holds the owner", "Success - directory open", "open the profile", vec![click(1)]))),
            raw_step(2, 3, "Find the owner of Acme Exports", None, "https://registry.test/acme",
                Some(resp("owner row on screen", "Success - profile open", "extract the owner", vec![Action::ExtractStructuredData { query: "owner name".to_string(), extract_links: false }]))),
            raw_step(3, 3, "Find the owner of Acme Exports", None, "https://registry.test/acme",
                Some(resp("owner extracted", "Success - owner read", "report", vec![done("owner_name: J. Doe Holdings", true)]))),
        ]),
        raw_traj("abandoned-search", Kind::MultiStep, vec![
            raw_step(1, 2, "Find the warranty length for the blender", None, url,
                Some(resp("maybe under support", "Success - store open", "open support", vec![click(0)]))),
            raw_step(2, 2, "Find the warranty length for the blender", None, url,
                Some(resp("nothing relevant here", "Failed - page lists no warranty", "give up", vec![done("could not find the warranty", false)]))),
        ]),
        raw_traj("broken-export", Kind::MultiStep, vec![
            raw_step(1, 2, "Check the shipping cutoff time", None, url,
                Some(resp("cutoff is on the faq", "Success - store open", "open the faq", vec![click(0)]))),
            raw_step(2, 2, "Check the shipping cutoff time", None, url, None),
        ]),
        raw_traj("empty-think", Kind::SingleStep, vec![
            raw_step(1, 1, "Confirm the support email address", None, url,
                Some(AgentResponse {
                    think: String::new(),
                    evaluation_previous_goal: "Success - page open".to_string(),
                    memory: "tracking the task".to_string(),
                    next_goal: "report".to_string(),
                    action: vec![done("support@registry.test", true)],
                })),
        ]),
    ]
}

/// Pipeline configuration shipped next to the raw corpus: default knobs
/// plus a small synonym table for the paraphrase augmentation.
pub fn pipeline_config() -> PipelineConfig {
    PipelineConfig {
        synonyms: BTreeMap::from([
            ("find".to_string(), vec!["locate".to_string(), "look up".to_string()]),
            ("verify".to_string(), vec!["confirm".to_string(), "validate".to_string()]),
            ("check".to_string(), vec!["inspect".to_string()]),
            ("owner".to_string(), vec!["proprietor".to_string()]),
            ("price".to_string(), vec!["cost".to_string()]),
        ]),
        ..PipelineConfig::default()
    }
}

/// Per-session answer probabilities for the scripted grading responder.
pub fn grading_probs() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("acme-registration".to_string(), 1.0),
        ("captcha-slider".to_string(), 0.6),
        ("globex-vetting".to_string(), 0.6),
        ("refund-policy".to_string(), 0.8),
        ("news-archive".to_string(), 0.3),
        ("price-check".to_string(), 1.0),
        ("owner-lookup".to_string(), 0.05),
    ])
}

/// One fully observed oracle episode as a chained multi-step trajectory.
pub fn oracle_session(site: &SiteGraph, task: &TaskSpec) -> Result<Trajectory, FixtureError> {
    let responses = oracle_responses(site, task)?;
    let mut sim = Simulator::reset(site, task);
    let n = responses.len() as u32;
    let mut steps = Vec::with_capacity(responses.len());
    for (i, gold) in responses.iter().enumerate() {
        let dom = sim.observe();
        steps.push(StepRecord {
            step_index: i as u32 + 1,
            question: task.instruction.clone(),
            screenshot_ref: None,
            dom,
            gold: Some(gold.clone()),
            predicted: None,
            step_count: n,
        });
        sim.step(&gold.action)?;
    }
    let mut traj = chain_multistep(&task.id, steps)
        .map_err(|e| FixtureError::Build(format!("task `{}`: {e}", task.id)))?;
    traj.difficulty = difficulty_from_path_len(responses.len());
    Ok(traj)
}

/// Three single-step gold samples over [`site_small`], one per difficulty
/// band, taken from the oracle's replay of the shipped tasks.
pub fn bench_single() -> Result<Vec<Trajectory>, FixtureError> {
    let site = site_small();
    let tasks = tasks_small();
    let samples = env_samples(&site, &tasks)?;
    let mut out = Vec::new();
    for level in [Difficulty::Easy, Difficulty::Moderate, Difficulty::Difficult] {
        let sample = samples
            .iter()
            .find(|s| s.difficulty == level)
            .expect("tasks cover every band");
        out.push(Trajectory {
            id: sample.id.clone(),
            kind: Kind::SingleStep,
            steps: vec![sample.step.clone()],
            difficulty: level,
            source: Source::Curated,
        });
    }
    Ok(out)
}

/// Four chained oracle sessions over [`site_small`].
pub fn bench_multi() -> Result<Vec<Trajectory>, FixtureError> {
    let site = site_small();
    let tasks = tasks_small();
    ["reach-directory", "find-registration", "find-oldest-filing", "audit-acme"]
        .iter()
        .map(|id| {
            let task = tasks.iter().find(|t| t.id == *id).expect("task exists");
            oracle_session(&site, task)
        })
        .collect()
}

fn gold_prediction(traj: &Trajectory, step: &StepRecord, with_index: bool) -> Prediction {
    Prediction {
        id: traj.id.clone(),
        step_index: with_index.then_some(step.step_index),
        response_raw_text: serialize_response(step.gold.as_ref().expect("bench carries gold")),
    }
}

/// Predictions that reproduce the single-step bench exactly.
pub fn preds_single_gold() -> Result<Vec<Prediction>, FixtureError> {
    Ok(bench_single()?
        .iter()
        .map(|t| gold_prediction(t, &t.steps[0], false))
        .collect())
}

/// Gold predictions with the moderate sample answered wrongly: scores
/// 100 / 0 / 100 per level and 66.7 overall.
pub fn preds_single_mixed() -> Result<Vec<Prediction>, FixtureError> {
    let bench = bench_single()?;
    let mut preds = Vec::new();
    for traj in &bench {
        let mut pred = gold_prediction(traj, &traj.steps[0], false);
        if traj.difficulty == Difficulty::Moderate {
            let mut wrong = traj.steps[0].gold.clone().expect("bench carries gold");
            wrong.action = vec![click(99)];
            pred.response_raw_text = serialize_response(&wrong);
        }
        preds.push(pred);
    }
    Ok(preds)
}

/// Step-keyed predictions for the multi-step bench with one corrupted step
/// in the last trajectory: 3 of 4 succeed, a 75.0 success rate.
pub fn preds_multi() -> Result<Vec<Prediction>, FixtureError> {
    let bench = bench_multi()?;
    let mut preds = Vec::new();
    for (ti, traj) in bench.iter().enumerate() {
        for step in &traj.steps {
            let mut pred = gold_prediction(traj, step, true);
            if ti == bench.len() - 1 && step.step_index == 2 {
                let mut wrong = step.gold.clone().expect("bench carries gold");
                wrong.action = vec![Action::GoBack];
                pred.response_raw_text = serialize_response(&wrong);
            }
            preds.push(pred);
        }
    }
    Ok(preds)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), FixtureError> {
    let mut text = serde_json::to_string_pretty(value).expect("fixture serializes");
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|source| FixtureError::Io { path: path.display().to_string(), source })
}

/// The canonical list of shipped fixture files, relative to `fixtures/`.
pub const FIXTURE_FILES: [&str; 12] = [
    "site_small.json",
    "site_tiny.json",
    "tasks_small.jsonl",
    "tasks_tiny.jsonl",
    "raw_synthetic.jsonl",
    "pipeline_config.json",
    "grading_probs.json",
    "bench_single.jsonl",
    "bench_multi.jsonl",
    "preds_single_gold.jsonl",
    "preds_single_mixed.jsonl",
    "preds_multi.jsonl",
];

/// Writes every fixture file into `dir`, creating it if needed.
pub fn write_all(dir: &Path) -> Result<(), FixtureError> {
    std::fs::create_dir_all(dir)
        .map_err(|source| FixtureError::Io { path: dir.display().to_string(), source })?;
    save_site(dir.join("site_small.json"), &site_small())?;
    save_site(dir.join("site_tiny.json"), &site_tiny())?;
    save_tasks(dir.join("tasks_small.jsonl"), &tasks_small())?;
    save_tasks(dir.join("tasks_tiny.jsonl"), &tasks_tiny())?;
    write_trajectories(dir.join("raw_synthetic.jsonl"), &raw_synthetic())?;
    write_json(&dir.join("pipeline_config.json"), &pipeline_config())?;
    write_json(&dir.join("grading_probs.json"), &grading_probs())?;
    write_trajectories(dir.join("bench_single.jsonl"), &bench_single()?)?;
    write_trajectories(dir.join("bench_multi.jsonl"), &bench_multi()?)?;
    write_predictions(dir.join("preds_single_gold.jsonl"), &preds_single_gold()?)?;
    write_predictions(dir.join("preds_single_mixed.jsonl"), &preds_single_mixed()?)?;
    write_predictions(dir.join("preds_multi.jsonl"), &preds_multi()?)?;
    Ok(())
}
