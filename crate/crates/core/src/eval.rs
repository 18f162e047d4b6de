//! Offline scoring against gold benches and online episode runs.
//!
//! Offline scoring is teacher-forced: every step of a prediction file is
//! compared against the gold action list for that step, with gold context
//! assumed for all prior steps. A step counts as correct only under the
//! binary whole-list match, and a multi-step trajectory succeeds only when
//! every one of its steps is correct. Online runs drive the page simulator
//! with an agent's raw text output and let the episode judge decide.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{oracle_responses, EnvError, SiteGraph, Simulator, TaskSpec};
use crate::grpo::ToyPolicy;
use crate::model::{Action, Difficulty, DomSnapshot, Trajectory};
use crate::parser::{parse_response, ParseOptions};
use crate::reward::{stepwise_accuracy, Stage};
use crate::util::derive_seed;

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// Response turns an online episode may take before the run gives up on the
/// agent. Matches the default task step budget.
pub const DEFAULT_ONLINE_MAX_STEPS: u32 = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema: {0}")]
    Schema(String),
    #[error("unknown report format `{0}` (expected json, csv, or markdown)")]
    UnknownFormat(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// One line of a prediction file: the raw model output for a sample, keyed
/// by sample id and, for multi-step benches, the step it answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_index: Option<u32>,
    pub response_raw_text: String,
}

pub fn predictions_from_str(text: &str) -> Result<Vec<Prediction>, EvalError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pred: Prediction = serde_json::from_str(line)
            .map_err(|e| EvalError::Schema(format!("predictions line {}: {e}", no + 1)))?;
        out.push(pred);
    }
    Ok(out)
}

pub fn predictions_to_string(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    predictions_from_str(&text)
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    predictions: &[Prediction],
) -> Result<(), EvalError> {
    let path = path.as_ref();
    std::fs::write(path, predictions_to_string(predictions))
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    SingleStep,
    MultiStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: Difficulty,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub id: String,
    pub level: Difficulty,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Aggregate scores for one prediction file. `overall_accuracy` is the exact
/// count ratio, so it always equals the count-weighted mean of the per-level
/// accuracies. For multi-step benches "correct" means every step of the
/// trajectory matched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineResult {
    pub schema_version: u32,
    pub mode: ScoreMode,
    pub levels: Vec<LevelStats>,
    pub total: usize,
    pub correct: usize,
    pub overall_accuracy: f64,
    pub verdicts: Vec<SampleVerdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn ratio(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn aggregate(mode: ScoreMode, verdicts: Vec<SampleVerdict>, warnings: Vec<String>) -> OfflineResult {
    let canonical = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Difficult];
    let mut levels: Vec<LevelStats> = canonical
        .iter()
        .map(|&level| LevelStats { level, total: 0, correct: 0, accuracy: 0.0 })
        .collect();
    if verdicts.iter().any(|v| v.level == Difficulty::Ungraded) {
        levels.push(LevelStats {
            level: Difficulty::Ungraded,
            total: 0,
            correct: 0,
            accuracy: 0.0,
        });
    }
    for v in &verdicts {
        let slot = levels.iter_mut().find(|l| l.level == v.level).expect("level slot");
        slot.total += 1;
        if v.correct {
            slot.correct += 1;
        }
    }
    for l in &mut levels {
        l.accuracy = ratio(l.correct, l.total);
    }
    let total = verdicts.len();
    let correct = verdicts.iter().filter(|v| v.correct).count();
    OfflineResult {
        schema_version: EVAL_SCHEMA_VERSION,
        mode,
        levels,
        total,
        correct,
        overall_accuracy: ratio(correct, total),
        verdicts,
        warnings,
    }
}

/// Binary whole-list check of a raw prediction against gold actions. A
/// response that fails the format check can never match.
fn raw_matches(raw: &str, gold: &[Action], f1_threshold: f64) -> (bool, Option<String>) {
    match parse_response(raw, &ParseOptions::default()) {
        Ok(resp) => {
            let acc = stepwise_accuracy(&resp.action, gold, Stage::Later, f1_threshold);
            if acc == 1.0 {
                (true, None)
            } else {
                (false, Some("action list mismatch".to_string()))
            }
        }
        Err(verdict) => {
            let first = verdict.failures.first().expect("failed verdict lists failures");
            (false, Some(format!("format: {} at {}", first.message, first.path)))
        }
    }
}

/// Maps `f` over `0..count` on up to `workers` threads. Results come back
/// slotted by index, so the output never depends on scheduling; one thread
/// (or one item) short-circuits to a plain loop.
fn par_map_indexed<U: Send>(
    count: usize,
    workers: usize,
    f: impl Fn(usize) -> U + Sync,
) -> Vec<U> {
    let workers = workers.max(1).min(count);
    if workers <= 1 {
        return (0..count).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut collected: Vec<(usize, U)> = Vec::with_capacity(count);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= count {
                            break;
                        }
                        local.push((i, f(i)));
                    }
                    local
                })
            })
            .collect();
        for handle in handles {
            collected.extend(handle.join().expect("worker panicked"));
        }
    });
    collected.sort_by_key(|&(i, _)| i);
    collected.into_iter().map(|(_, u)| u).collect()
}

fn bench_ids(bench: &[Trajectory]) -> Result<BTreeSet<String>, EvalError> {
    let mut ids = BTreeSet::new();
    for traj in bench {
        if !ids.insert(traj.id.clone()) {
            return Err(EvalError::Schema(format!("gold bench repeats id `{}`", traj.id)));
        }
    }
    Ok(ids)
}

/// Scores a single-step bench: one prediction per sample id, correct iff the
/// predicted action list matches gold under the binary whole-list rule.
/// Missing predictions count as wrong and are logged; predictions for ids
/// outside the bench are logged and ignored.
pub fn score_offline_single(
    predictions: &[Prediction],
    bench: &[Trajectory],
    f1_threshold: f64,
) -> Result<OfflineResult, EvalError> {
    score_offline_single_with(predictions, bench, f1_threshold, 1)
}

/// [`score_offline_single`] with the per-sample match checks spread over up
/// to `workers` threads. Aggregation order is fixed by the bench, so the
/// result is identical for every worker count.
pub fn score_offline_single_with(
    predictions: &[Prediction],
    bench: &[Trajectory],
    f1_threshold: f64,
    workers: usize,
) -> Result<OfflineResult, EvalError> {
    if bench.is_empty() {
        return Err(EvalError::Schema("gold bench is empty".to_string()));
    }
    let ids = bench_ids(bench)?;
    for traj in bench {
        if traj.steps.len() != 1 {
            return Err(EvalError::Schema(format!(
                "single-step bench trajectory `{}` has {} steps, expected 1",
                traj.id,
                traj.steps.len()
            )));
        }
        if traj.steps[0].gold.is_none() {
            return Err(EvalError::Schema(format!(
                "single-step bench trajectory `{}` lacks a gold response",
                traj.id
            )));
        }
    }
    let mut by_id: BTreeMap<&str, &Prediction> = BTreeMap::new();
    let mut warnings = Vec::new();
    for pred in predictions {
        if let Some(si) = pred.step_index {
            if si != 1 {
                return Err(EvalError::Schema(format!(
                    "prediction `{}` carries step_index {si}; single-step scoring allows only 1",
                    pred.id
                )));
            }
        }
        if by_id.insert(pred.id.as_str(), pred).is_some() {
            return Err(EvalError::Schema(format!("duplicate prediction for id `{}`", pred.id)));
        }
        if !ids.contains(&pred.id) {
            warnings.push(format!("prediction for unknown id `{}` ignored", pred.id));
        }
    }
    let checked: Vec<Option<(bool, Option<String>)>> = par_map_indexed(bench.len(), workers, |i| {
        let traj = &bench[i];
        let gold = &traj.steps[0].gold.as_ref().expect("validated").action;
        by_id
            .get(traj.id.as_str())
            .map(|pred| raw_matches(&pred.response_raw_text, gold, f1_threshold))
    });
    let mut verdicts = Vec::with_capacity(bench.len());
    for (traj, check) in bench.iter().zip(checked) {
        let (correct, reason) = match check {
            Some(outcome) => outcome,
            None => {
                warnings.push(format!("missing prediction for id `{}`", traj.id));
                (false, Some("missing prediction".to_string()))
            }
        };
        verdicts.push(SampleVerdict { id: traj.id.clone(), level: traj.difficulty, correct, reason });
    }
    Ok(aggregate(ScoreMode::SingleStep, verdicts, warnings))
}

/// Scores a multi-step bench teacher-forced: predictions are keyed
/// `(id, step_index)` and a trajectory succeeds only when every step's
/// prediction matches its gold action list. Partial coverage fails the
/// trajectory with a reason rather than erroring.
pub fn score_offline_multi(
    predictions: &[Prediction],
    bench: &[Trajectory],
    f1_threshold: f64,
) -> Result<OfflineResult, EvalError> {
    score_offline_multi_with(predictions, bench, f1_threshold, 1)
}

/// One scored (trajectory, step) unit: absent when no prediction arrived,
/// otherwise pass/fail with the failure reason.
type UnitCheck = Option<(bool, Option<String>)>;

/// [`score_offline_multi`] with the per-step match checks spread over up to
/// `workers` threads. The checks are pure, so evaluating steps past a
/// trajectory's first failure (which the sequential sweep skips) cannot
/// change the verdicts.
pub fn score_offline_multi_with(
    predictions: &[Prediction],
    bench: &[Trajectory],
    f1_threshold: f64,
    workers: usize,
) -> Result<OfflineResult, EvalError> {
    if bench.is_empty() {
        return Err(EvalError::Schema("gold bench is empty".to_string()));
    }
    let ids = bench_ids(bench)?;
    for traj in bench {
        if traj.steps.is_empty() {
            return Err(EvalError::Schema(format!("bench trajectory `{}` has no steps", traj.id)));
        }
        for step in &traj.steps {
            if step.gold.is_none() {
                return Err(EvalError::Schema(format!(
                    "bench trajectory `{}` step {} lacks a gold response",
                    traj.id, step.step_index
                )));
            }
        }
    }
    let mut by_key: BTreeMap<(&str, u32), &Prediction> = BTreeMap::new();
    let mut warnings = Vec::new();
    for pred in predictions {
        let si = pred.step_index.ok_or_else(|| {
            EvalError::Schema(format!(
                "prediction `{}` lacks step_index; multi-step scoring requires it",
                pred.id
            ))
        })?;
        if by_key.insert((pred.id.as_str(), si), pred).is_some() {
            return Err(EvalError::Schema(format!(
                "duplicate prediction for id `{}` step {si}",
                pred.id
            )));
        }
        if !ids.contains(&pred.id) {
            warnings.push(format!("prediction for unknown id `{}` ignored", pred.id));
        }
    }
    let units: Vec<(usize, usize)> = bench
        .iter()
        .enumerate()
        .flat_map(|(ti, traj)| (0..traj.steps.len()).map(move |pos| (ti, pos)))
        .collect();
    let checked: Vec<UnitCheck> = par_map_indexed(units.len(), workers, |u| {
        let (ti, pos) = units[u];
        let step = &bench[ti].steps[pos];
        let gold = &step.gold.as_ref().expect("validated").action;
        by_key
            .get(&(bench[ti].id.as_str(), step.step_index))
            .map(|pred| raw_matches(&pred.response_raw_text, gold, f1_threshold))
    });
    let mut by_unit: BTreeMap<(usize, usize), UnitCheck> = BTreeMap::new();
    for (&(ti, pos), check) in units.iter().zip(checked) {
        by_unit.insert((ti, pos), check);
    }
    let mut verdicts = Vec::with_capacity(bench.len());
    for (ti, traj) in bench.iter().enumerate() {
        let mut correct = true;
        let mut reason = None;
        for (pos, step) in traj.steps.iter().enumerate() {
            match by_unit.remove(&(ti, pos)).expect("every unit was checked") {
                Some((ok, why)) => {
                    if !ok {
                        correct = false;
                        reason = Some(format!(
                            "step {}: {}",
                            step.step_index,
                            why.expect("mismatch carries a reason")
                        ));
                        break;
                    }
                }
                None => {
                    warnings.push(format!(
                        "missing prediction for id `{}` step {}",
                        traj.id, step.step_index
                    ));
                    correct = false;
                    reason = Some(format!("step {}: missing prediction", step.step_index));
                    break;
                }
            }
        }
        verdicts.push(SampleVerdict { id: traj.id.clone(), level: traj.difficulty, correct, reason });
    }
    Ok(aggregate(ScoreMode::MultiStep, verdicts, warnings))
}

/// Drives episodes against the simulator. `begin` runs once per task;
/// returning an error from either hook fails that episode and the run moves
/// on to the next task.
pub trait OnlineAgent {
    fn begin(&mut self, _site: &SiteGraph, _task: &TaskSpec, _seed: u64) -> Result<(), String> {
        Ok(())
    }
    fn act(&mut self, task: &TaskSpec, obs: &DomSnapshot, step_no: u32) -> Result<String, String>;
}

/// Replays the environment oracle's precomputed action sequence.
#[derive(Default)]
pub struct OracleAgent {
    queue: VecDeque<String>,
}

impl OnlineAgent for OracleAgent {
    fn begin(&mut self, site: &SiteGraph, task: &TaskSpec, _seed: u64) -> Result<(), String> {
        let responses = oracle_responses(site, task).map_err(|e| e.to_string())?;
        self.queue = responses.iter().map(crate::parser::serialize_response).collect();
        Ok(())
    }

    fn act(&mut self, _task: &TaskSpec, _obs: &DomSnapshot, _step_no: u32) -> Result<String, String> {
        self.queue.pop_front().ok_or_else(|| "oracle plan exhausted".to_string())
    }
}

/// Greedy decoding from a trained policy checkpoint.
pub struct PolicyAgent {
    pub policy: ToyPolicy,
    pub max_tokens: usize,
}

impl OnlineAgent for PolicyAgent {
    fn act(&mut self, task: &TaskSpec, obs: &DomSnapshot, step_no: u32) -> Result<String, String> {
        Ok(self.policy.respond(
            &task.instruction,
            &obs.url,
            obs.viewport_start,
            step_no,
            self.max_tokens,
        ))
    }
}

/// Re-executes the raw responses recorded in earlier episode logs.
pub struct ReplayAgent {
    transcripts: BTreeMap<String, Vec<String>>,
    queue: VecDeque<String>,
}

impl ReplayAgent {
    pub fn from_episodes(episodes: &[EpisodeLog]) -> Result<ReplayAgent, EvalError> {
        let mut transcripts = BTreeMap::new();
        for ep in episodes {
            let raws: Vec<String> = ep.steps.iter().map(|s| s.raw_response.clone()).collect();
            if transcripts.insert(ep.task_id.clone(), raws).is_some() {
                return Err(EvalError::Schema(format!(
                    "episode log repeats task `{}`",
                    ep.task_id
                )));
            }
        }
        Ok(ReplayAgent { transcripts, queue: VecDeque::new() })
    }
}

impl OnlineAgent for ReplayAgent {
    fn begin(&mut self, _site: &SiteGraph, task: &TaskSpec, _seed: u64) -> Result<(), String> {
        match self.transcripts.get(&task.id) {
            Some(raws) => {
                self.queue = raws.iter().cloned().collect();
                Ok(())
            }
            None => Err(format!("no logged episode for task `{}`", task.id)),
        }
    }

    fn act(&mut self, _task: &TaskSpec, _obs: &DomSnapshot, _step_no: u32) -> Result<String, String> {
        self.queue.pop_front().ok_or_else(|| "episode log exhausted".to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub step_no: u32,
    pub url: String,
    pub raw_response: String,
    pub parsed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub task_id: String,
    pub steps: Vec<EpisodeStep>,
    pub completed: bool,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_error: Option<String>,
}

/// Aggregate over one task list. Success requires completion, so the
/// unconditional success rate can never exceed the completion rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineResult {
    pub schema_version: u32,
    pub total_tasks: usize,
    pub completed: usize,
    pub succeeded: usize,
    pub completion_rate: f64,
    pub success_rate_unconditional: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_rate_among_completed: Option<f64>,
    pub episodes: Vec<EpisodeLog>,
}

pub fn episodes_to_string(episodes: &[EpisodeLog]) -> String {
    let mut out = String::new();
    for ep in episodes {
        out.push_str(&serde_json::to_string(ep).expect("episode serializes"));
        out.push('\n');
    }
    out
}

pub fn episodes_from_str(text: &str) -> Result<Vec<EpisodeLog>, EvalError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ep: EpisodeLog = serde_json::from_str(line)
            .map_err(|e| EvalError::Schema(format!("episodes line {}: {e}", no + 1)))?;
        out.push(ep);
    }
    Ok(out)
}

pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<EpisodeLog>, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    episodes_from_str(&text)
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Response turns allowed per episode; the task's own step budget still
    /// decides whether a finished episode counts as completed.
    pub max_steps: u32,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { max_steps: DEFAULT_ONLINE_MAX_STEPS, seed: 0 }
    }
}

/// Runs every task once. Agent errors and format failures fail the episode
/// and the run continues; fixture problems abort the whole run.
pub fn run_online(
    agent: &mut dyn OnlineAgent,
    site: &SiteGraph,
    tasks: &[TaskSpec],
    opts: &RunOptions,
) -> Result<OnlineResult, EvalError> {
    site.validate()?;
    for task in tasks {
        task.validate_against(site)?;
    }
    let mut episodes = Vec::with_capacity(tasks.len());
    for (ti, task) in tasks.iter().enumerate() {
        let seed = derive_seed(opts.seed, &[ti as u64]);
        episodes.push(run_episode(agent, site, task, seed, opts.max_steps)?);
    }
    Ok(aggregate_online(episodes))
}

/// [`run_online`] with episodes spread over up to `workers` threads, each on
/// its own environment instance and its own agent from `make_agent`. Episode
/// seeds depend on the task index alone, so the result matches the
/// sequential run whenever the agent keeps no state across episodes (all
/// shipped agents reset in `begin`).
pub fn run_online_parallel<A: OnlineAgent>(
    make_agent: impl Fn() -> A + Sync,
    site: &SiteGraph,
    tasks: &[TaskSpec],
    opts: &RunOptions,
    workers: usize,
) -> Result<OnlineResult, EvalError> {
    site.validate()?;
    for task in tasks {
        task.validate_against(site)?;
    }
    let workers = workers.max(1).min(tasks.len().max(1));
    let next = AtomicUsize::new(0);
    let mut collected: Vec<(usize, Result<EpisodeLog, EvalError>)> =
        Vec::with_capacity(tasks.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut agent = make_agent();
                    let mut local = Vec::new();
                    loop {
                        let ti = next.fetch_add(1, Ordering::Relaxed);
                        if ti >= tasks.len() {
                            break;
                        }
                        let seed = derive_seed(opts.seed, &[ti as u64]);
                        local.push((
                            ti,
                            run_episode(&mut agent, site, &tasks[ti], seed, opts.max_steps),
                        ));
                    }
                    local
                })
            })
            .collect();
        for handle in handles {
            collected.extend(handle.join().expect("episode worker panicked"));
        }
    });
    collected.sort_by_key(|&(i, _)| i);
    let mut episodes = Vec::with_capacity(tasks.len());
    // The earliest failing task decides the error, as in the sequential run.
    for (_, episode) in collected {
        episodes.push(episode?);
    }
    Ok(aggregate_online(episodes))
}

fn run_episode(
    agent: &mut dyn OnlineAgent,
    site: &SiteGraph,
    task: &TaskSpec,
    seed: u64,
    max_steps: u32,
) -> Result<EpisodeLog, EvalError> {
    let mut log = EpisodeLog {
        task_id: task.id.clone(),
        steps: Vec::new(),
        completed: false,
        success: false,
        reasons: Vec::new(),
        agent_error: None,
    };
    if let Err(msg) = agent.begin(site, task, seed) {
        log.agent_error = Some(msg);
        log.reasons.push("agent failed before the first step".to_string());
        return Ok(log);
    }
    let mut sim = Simulator::reset(site, task);
    for step_no in 1..=max_steps {
        if sim.state.terminated.is_some() {
            break;
        }
        let obs = sim.observe();
        let raw = match agent.act(task, &obs, step_no) {
            Ok(raw) => raw,
            Err(msg) => {
                log.agent_error = Some(msg);
                break;
            }
        };
        match parse_response(&raw, &ParseOptions::default()) {
            Ok(resp) => {
                let outcomes = sim.step(&resp.action)?;
                log.steps.push(EpisodeStep {
                    step_no,
                    url: obs.url,
                    raw_response: raw,
                    parsed: true,
                    failure: None,
                    outcomes: outcomes
                        .iter()
                        .map(|o| {
                            if o.success {
                                format!("ok: {}", o.message)
                            } else {
                                format!("failed: {}", o.message)
                            }
                        })
                        .collect(),
                });
            }
            Err(verdict) => {
                let first = verdict.failures.first().expect("failed verdict lists failures");
                log.steps.push(EpisodeStep {
                    step_no,
                    url: obs.url,
                    raw_response: raw,
                    parsed: false,
                    failure: Some(format!("{} at {}", first.message, first.path)),
                    outcomes: Vec::new(),
                });
                log.reasons.push(format!("step {step_no}: response failed the format check"));
                break;
            }
        }
    }
    let judgement = sim.judge();
    log.completed = judgement.completed;
    log.success = judgement.success && log.agent_error.is_none() && log.reasons.is_empty();
    log.reasons.extend(judgement.reasons);
    Ok(log)
}

/// Folds episode logs into the run-level result. Unconditional success
/// divides by all tasks; the conditional rate divides by completions and is
/// absent when nothing completed.
pub fn aggregate_online(episodes: Vec<EpisodeLog>) -> OnlineResult {
    let total = episodes.len();
    let completed = episodes.iter().filter(|e| e.completed).count();
    let succeeded = episodes.iter().filter(|e| e.success).count();
    OnlineResult {
        schema_version: EVAL_SCHEMA_VERSION,
        total_tasks: total,
        completed,
        succeeded,
        completion_rate: ratio(completed, total),
        success_rate_unconditional: ratio(succeeded, total),
        success_rate_among_completed: if completed == 0 {
            None
        } else {
            Some(ratio(succeeded, completed))
        },
        episodes,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "markdown-table" | "md" => Ok(ReportFormat::Markdown),
            other => Err(EvalError::UnknownFormat(other.to_string())),
        }
    }
}

/// Report wrapper carrying the resolved configuration hash, so any artifact
/// can be traced back to the exact settings that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope<T> {
    pub config_hash: String,
    pub result: T,
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn level_label(level: Difficulty) -> &'static str {
    match level {
        Difficulty::Easy => "Easy",
        Difficulty::Moderate => "Moderate",
        Difficulty::Difficult => "Difficult",
        Difficulty::Ungraded => "Ungraded",
    }
}

pub fn emit_offline(
    result: &OfflineResult,
    format: ReportFormat,
    config_hash: &str,
) -> String {
    match format {
        ReportFormat::Json => {
            let envelope =
                ReportEnvelope { config_hash: config_hash.to_string(), result: result.clone() };
            let mut text = serde_json::to_string_pretty(&envelope).expect("report serializes");
            text.push('\n');
            text
        }
        ReportFormat::Csv => {
            let mut out = format!("# config_hash={config_hash}\n");
            out.push_str("level,total,correct,accuracy_pct\n");
            for l in &result.levels {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    level_label(l.level).to_lowercase(),
                    l.total,
                    l.correct,
                    pct(l.accuracy)
                ));
            }
            out.push_str(&format!(
                "overall,{},{},{}\n",
                result.total,
                result.correct,
                pct(result.overall_accuracy)
            ));
            out
        }
        ReportFormat::Markdown => {
            let mut header = String::from("|");
            let mut rule = String::from("|");
            let mut row = String::from("|");
            for l in &result.levels {
                header.push_str(&format!(" {} |", level_label(l.level)));
                rule.push_str(" ---: |");
                row.push_str(&format!(" {} |", pct(l.accuracy)));
            }
            header.push_str(" Overall |");
            rule.push_str(" ---: |");
            row.push_str(&format!(" {} |", pct(result.overall_accuracy)));
            let mode = match result.mode {
                ScoreMode::SingleStep => "single-step",
                ScoreMode::MultiStep => "multi-step",
            };
            format!(
                "{header}\n{rule}\n{row}\n\n{} samples, {mode} accuracy in percent.\nconfig: {config_hash}\n",
                result.total
            )
        }
    }
}

pub fn emit_online(result: &OnlineResult, format: ReportFormat, config_hash: &str) -> String {
    match format {
        ReportFormat::Json => {
            let envelope =
                ReportEnvelope { config_hash: config_hash.to_string(), result: result.clone() };
            let mut text = serde_json::to_string_pretty(&envelope).expect("report serializes");
            text.push('\n');
            text
        }
        ReportFormat::Csv => {
            let mut out = format!("# config_hash={config_hash}\n");
            out.push_str("metric,value_pct\n");
            out.push_str(&format!("completion,{}\n", pct(result.completion_rate)));
            out.push_str(&format!("success,{}\n", pct(result.success_rate_unconditional)));
            out.push_str(&format!(
                "success_among_completed,{}\n",
                result.success_rate_among_completed.map(pct).unwrap_or_else(|| "n/a".to_string())
            ));
            out
        }
        ReportFormat::Markdown => {
            format!(
                "| Completion | Success | Success among completed |\n\
                 | ---: | ---: | ---: |\n\
                 | {} | {} | {} |\n\n{} tasks, rates in percent.\nconfig: {config_hash}\n",
                pct(result.completion_rate),
                pct(result.success_rate_unconditional),
                result.success_rate_among_completed.map(pct).unwrap_or_else(|| "n/a".to_string()),
                result.total_tasks
            )
        }
    }
}
