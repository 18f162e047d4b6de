//! Trajectory curation: filtering, step cleaning, prompt refinement,
//! augmentation, multi-step chaining, and difficulty grading.
//!
//! Every stage is an idempotent map over the corpus, and the report it
//! emits balances exactly: at each stage, kept + dropped = input, with
//! additions (augmented copies, chained trajectories) counted separately.
//! Nothing here ever edits the gold action contents of a surviving step;
//! stages only decide membership, renumber, and rewrite prompt-side text.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::bucket_key;
use crate::model::{
    canonical_action_list, Action, AgentResponse, Difficulty, Kind, Source, StepRecord, Trajectory,
};
use crate::parser::serialize_response;
use crate::reward::{stepwise_accuracy, Stage};
use crate::util::{derive_seed, stable_hash64, uniform_f64};

/// Prefix stamped onto a failure-marked evaluation once the step it blamed
/// has been removed, so a second cleaning pass does not blame the new
/// predecessor.
pub const CLEANED_PREFIX: &str = "[cleaned] ";

pub const PARAPHRASE_SUFFIX: &str = "__para";
pub const NO_SCREENSHOT_SUFFIX: &str = "__noshot";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("chaining needs at least two steps, got {0}")]
    TooFewSteps(usize),
    #[error("trajectory `{0}` is not a chained multi-step trajectory")]
    NotChained(String),
    #[error("trajectory `{0}` lacks a gold response needed for chaining")]
    MissingGold(String),
    #[error("grader: {0}")]
    Grader(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Filter,
    Clean,
    Refine,
    Augment,
    Chain,
    Grade,
}

pub const ALL_STAGES: [StageName; 6] = [
    StageName::Filter,
    StageName::Clean,
    StageName::Refine,
    StageName::Augment,
    StageName::Chain,
    StageName::Grade,
];

impl StageName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::Filter => "filter",
            StageName::Clean => "clean",
            StageName::Refine => "refine",
            StageName::Augment => "augment",
            StageName::Chain => "chain",
            StageName::Grade => "grade",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    TemplateParaphrase,
    DropScreenshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraderKind {
    Oracle,
    Rule,
}

fn default_failure_markers() -> Vec<String> {
    vec!["Failed".to_string(), "Unknown".to_string()]
}
fn default_example_open() -> String {
    "<example>".to_string()
}
fn default_example_close() -> String {
    "</example>".to_string()
}
fn default_augment_ops() -> Vec<AugmentOp> {
    vec![AugmentOp::TemplateParaphrase, AugmentOp::DropScreenshot]
}
fn default_grade_k() -> u32 {
    5
}
fn default_f1_threshold() -> f64 {
    0.5
}

/// Knobs for the whole pipeline. The failure markers and example delimiters
/// are configuration on purpose: the operations are fixed, the patterns in
/// real data are not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub failure_markers: Vec<String>,
    pub example_open: String,
    pub example_close: String,
    pub augment_ops: Vec<AugmentOp>,
    /// Paraphrase table: lowercase word -> replacement candidates.
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub seed: u64,
    pub grader: GraderKind,
    pub grade_k: u32,
    pub f1_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            failure_markers: default_failure_markers(),
            example_open: default_example_open(),
            example_close: default_example_close(),
            augment_ops: default_augment_ops(),
            synonyms: BTreeMap::new(),
            seed: 0,
            grader: GraderKind::Rule,
            grade_k: default_grade_k(),
            f1_threshold: default_f1_threshold(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.failure_markers.iter().any(String::is_empty) {
            return Err("failure markers must be non-empty".to_string());
        }
        if self.example_open.is_empty() || self.example_close.is_empty() {
            return Err("example delimiters must be non-empty".to_string());
        }
        if self.example_open == self.example_close {
            return Err("example delimiters must differ".to_string());
        }
        if self.grade_k == 0 {
            return Err("grade_k must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.f1_threshold) {
            return Err("f1_threshold must be in [0, 1]".to_string());
        }
        Ok(())
    }
}

/// Per-stage bookkeeping. `input = kept + dropped` always holds; `added`
/// counts new trajectories the stage created on top of the kept ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage: String,
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub added: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub drop_reasons: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged: Vec<String>,
}

impl StageCounts {
    fn new(stage: StageName, input: usize) -> StageCounts {
        StageCounts { stage: stage.as_str().to_string(), input, ..StageCounts::default() }
    }

    fn drop(&mut self, reason: &str) {
        self.dropped += 1;
        *self.drop_reasons.entry(reason.to_string()).or_insert(0) += 1;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub stages: Vec<StageCounts>,
    /// Trajectories per difficulty level after the last executed stage.
    pub level_distribution: BTreeMap<String, usize>,
}

/// Keeps a trajectory iff its final step's gold action list ends with a
/// successful `done` and every step carries a well-formed gold response.
pub fn filter_trajectories(raw: Vec<Trajectory>) -> (Vec<Trajectory>, Vec<(Trajectory, String)>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for traj in raw {
        match filter_reason(&traj) {
            None => kept.push(traj),
            Some(reason) => dropped.push((traj, reason)),
        }
    }
    (kept, dropped)
}

fn filter_reason(traj: &Trajectory) -> Option<String> {
    if traj.steps.is_empty() {
        return Some("empty".to_string());
    }
    for step in &traj.steps {
        match &step.gold {
            None => return Some("incomplete".to_string()),
            Some(gold) if !gold.well_formed(true) => return Some("malformed".to_string()),
            Some(_) => {}
        }
    }
    let last = traj.steps.last().expect("non-empty");
    let gold = last.gold.as_ref().expect("checked above");
    match gold.action.last() {
        Some(Action::Done { success: true, .. }) => None,
        Some(Action::Done { success: false, .. }) => Some("unsuccessful".to_string()),
        _ => Some("no_final_done".to_string()),
    }
}

fn marked(markers: &[String], gold: Option<&AgentResponse>) -> bool {
    gold.is_some_and(|g| {
        markers.iter().any(|m| g.evaluation_previous_goal.starts_with(m.as_str()))
    })
}

/// Removes retry noise in two phases per pass. First, a step whose
/// successor's evaluation opens with a failure marker is dropped as a
/// failed attempt; a surviving marked step then gets the `[cleaned] `
/// prefix on its evaluation, which consumes the marker and makes the
/// operation idempotent. Second, consecutive survivors repeating the same
/// canonical action list collapse to the first. Blame runs before dedup so
/// a retry run keeps the attempt that finally worked rather than the
/// failures before it. Gold action contents are never touched. The pass
/// repeats until nothing changes, so drops that create new adjacencies are
/// resolved within one call.
pub fn clean_steps(mut traj: Trajectory, markers: &[String]) -> Trajectory {
    loop {
        let blamed = drop_blamed(&mut traj, markers);
        let deduped = drop_duplicates(&mut traj);
        if !blamed && !deduped {
            break;
        }
    }
    renumber(&mut traj);
    traj
}

fn drop_blamed(traj: &mut Trajectory, markers: &[String]) -> bool {
    let n = traj.steps.len();
    let mut drop = vec![false; n];
    for i in 0..n {
        if i + 1 < n && marked(markers, traj.steps[i + 1].gold.as_ref()) {
            drop[i] = true;
        }
    }
    if !drop.iter().any(|d| *d) {
        return false;
    }
    let steps = std::mem::take(&mut traj.steps);
    for (i, mut step) in steps.into_iter().enumerate() {
        if drop[i] {
            continue;
        }
        if i > 0 && drop[i - 1] && marked(markers, step.gold.as_ref()) {
            let gold = step.gold.as_mut().expect("marked implies gold");
            gold.evaluation_previous_goal =
                format!("{CLEANED_PREFIX}{}", gold.evaluation_previous_goal);
        }
        traj.steps.push(step);
    }
    true
}

fn drop_duplicates(traj: &mut Trajectory) -> bool {
    let n = traj.steps.len();
    let canon: Vec<Option<String>> = traj
        .steps
        .iter()
        .map(|s| s.gold.as_ref().map(|g| canonical_action_list(&g.action)))
        .collect();
    let mut drop = vec![false; n];
    let mut prev_kept: Option<usize> = None;
    for i in 0..n {
        if let (Some(p), Some(c)) = (prev_kept.and_then(|p| canon[p].as_ref()), canon[i].as_ref())
        {
            if p == c {
                drop[i] = true;
                continue;
            }
        }
        prev_kept = Some(i);
    }
    if !drop.iter().any(|d| *d) {
        return false;
    }
    let steps = std::mem::take(&mut traj.steps);
    for (i, step) in steps.into_iter().enumerate() {
        if !drop[i] {
            traj.steps.push(step);
        }
    }
    true
}

fn renumber(traj: &mut Trajectory) {
    let n = traj.steps.len() as u32;
    for (i, step) in traj.steps.iter_mut().enumerate() {
        step.step_index = i as u32 + 1;
        step.step_count = n;
    }
}

/// Removes delimited exemplar spans from every step's question. Returns the
/// refined trajectory, or the untouched trajectory and `false` when any
/// question has an opening delimiter without a matching close.
pub fn refine(traj: Trajectory, open: &str, close: &str) -> (Trajectory, bool) {
    let mut stripped = Vec::with_capacity(traj.steps.len());
    for step in &traj.steps {
        match strip_spans(&step.question, open, close) {
            Some(q) => stripped.push(q),
            None => return (traj, false),
        }
    }
    let mut traj = traj;
    for (step, q) in traj.steps.iter_mut().zip(stripped) {
        step.question = q;
    }
    (traj, true)
}

/// Cuts every `open ... close` span, including the delimiters. `None` when
/// a span opens and never closes. A stray close with no opener is kept as
/// plain text.
fn strip_spans(text: &str, open: &str, close: &str) -> Option<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    loop {
        match rest.find(open) {
            None => {
                out.push_str(rest);
                return Some(out);
            }
            Some(start) => {
                out.push_str(&rest[..start]);
                let after = &rest[start + open.len()..];
                let end = after.find(close)?;
                rest = &after[end + close.len()..];
            }
        }
    }
}

/// Seeded word-level paraphrase: every whitespace token whose lowercase form
/// has a synonym entry is replaced by one deterministic choice from its
/// candidate list. An empty table is the identity.
pub fn paraphrase_question(
    question: &str,
    synonyms: &BTreeMap<String, Vec<String>>,
    seed: u64,
) -> String {
    if synonyms.is_empty() {
        return question.to_string();
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    question
        .split_whitespace()
        .map(|word| match synonyms.get(&word.to_lowercase()) {
            Some(options) if !options.is_empty() => {
                let pick = (uniform_f64(&mut rng) * options.len() as f64) as usize;
                options[pick.min(options.len() - 1)].clone()
            }
            _ => word.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_augmented_id(id: &str) -> bool {
    id.ends_with(PARAPHRASE_SUFFIX) || id.ends_with(NO_SCREENSHOT_SUFFIX)
}

/// Adds augmented copies next to the originals: a paraphrased variant and a
/// screenshot-free variant, tagged by id suffix and marked curated. Copies
/// are never augmented again, and a copy whose id already exists in the
/// corpus is skipped, so the stage is idempotent.
pub fn augment(mut corpus: Vec<Trajectory>, cfg: &PipelineConfig) -> (Vec<Trajectory>, usize) {
    let existing: std::collections::BTreeSet<String> =
        corpus.iter().map(|t| t.id.clone()).collect();
    let mut added = Vec::new();
    for traj in &corpus {
        if is_augmented_id(&traj.id) {
            continue;
        }
        for op in &cfg.augment_ops {
            let (suffix, copy) = match op {
                AugmentOp::TemplateParaphrase => {
                    let mut copy = traj.clone();
                    for step in &mut copy.steps {
                        let seed = derive_seed(
                            cfg.seed,
                            &[stable_hash64(traj.id.as_bytes()), step.step_index as u64],
                        );
                        step.question = paraphrase_question(&step.question, &cfg.synonyms, seed);
                    }
                    (PARAPHRASE_SUFFIX, copy)
                }
                AugmentOp::DropScreenshot => {
                    let mut copy = traj.clone();
                    for step in &mut copy.steps {
                        step.screenshot_ref = None;
                    }
                    (NO_SCREENSHOT_SUFFIX, copy)
                }
            };
            let id = format!("{}{suffix}", traj.id);
            if existing.contains(&id) {
                continue;
            }
            let mut copy = copy;
            copy.id = id;
            copy.source = Source::Curated;
            added.push(copy);
        }
    }
    let count = added.len();
    corpus.extend(added);
    (corpus, count)
}

fn observation_ref(step: &StepRecord) -> String {
    match &step.screenshot_ref {
        Some(r) => r.clone(),
        None => format!("{}#{}", step.dom.url, step.dom.viewport_start),
    }
}

/// Rewrites every question after the first into the serialized previous
/// gold response plus the new step's observation reference. Recomputing
/// from the same golds and observations reproduces the same questions.
fn rewrite_chain_questions(id: &str, steps: &mut [StepRecord]) -> Result<(), PipelineError> {
    for i in 1..steps.len() {
        let prev_gold = steps[i - 1]
            .gold
            .as_ref()
            .ok_or_else(|| PipelineError::MissingGold(id.to_string()))?;
        steps[i].question = format!(
            "{}\n[observation] {}",
            serialize_response(prev_gold),
            observation_ref(&steps[i])
        );
    }
    Ok(())
}

/// Builds one multi-step trajectory from ordered single steps of the same
/// task: every question after the first becomes the serialized previous
/// gold response plus the new step's observation reference, the
/// think-action-observation loop. Gold responses are carried over untouched.
pub fn chain_multistep(id: &str, steps: Vec<StepRecord>) -> Result<Trajectory, PipelineError> {
    if steps.len() < 2 {
        return Err(PipelineError::TooFewSteps(steps.len()));
    }
    let mut steps = steps;
    rewrite_chain_questions(id, &mut steps)?;
    let mut traj = Trajectory {
        id: id.to_string(),
        kind: Kind::MultiStep,
        difficulty: Difficulty::Ungraded,
        steps,
        source: Source::Curated,
    };
    renumber(&mut traj);
    Ok(traj)
}

/// Splits a chained trajectory back into single-step trajectories with ids
/// `<id>__<k>`. Gold responses come back exactly as they went in; the
/// replaced questions stay replaced, which is why only gold equality is
/// promised.
pub fn unchain(traj: &Trajectory) -> Result<Vec<Trajectory>, PipelineError> {
    if traj.kind != Kind::MultiStep || traj.steps.len() < 2 {
        return Err(PipelineError::NotChained(traj.id.clone()));
    }
    Ok(traj
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let mut step = step.clone();
            step.step_index = 1;
            step.step_count = 1;
            Trajectory {
                id: format!("{}__{}", traj.id, i + 1),
                kind: Kind::SingleStep,
                difficulty: traj.difficulty,
                steps: vec![step],
                source: traj.source,
            }
        })
        .collect())
}

/// Corpus-level chaining: every trajectory with two or more steps has its
/// prompts rewritten into the think-action-observation loop and becomes
/// multi-step. Difficulty and source are preserved; single-step
/// trajectories pass through untouched.
pub fn chain_stage(corpus: Vec<Trajectory>) -> Result<(Vec<Trajectory>, StageCounts), PipelineError> {
    let mut counts = StageCounts::new(StageName::Chain, corpus.len());
    let mut out = Vec::with_capacity(corpus.len());
    for mut traj in corpus {
        if traj.steps.len() >= 2 {
            rewrite_chain_questions(&traj.id, &mut traj.steps)?;
            traj.kind = Kind::MultiStep;
            renumber(&mut traj);
        }
        counts.kept += 1;
        out.push(traj);
    }
    Ok((out, counts))
}

/// Anything that can answer a question step: the scripted fixture responder
/// for tests and report reproduction, or a trained policy.
pub trait GraderOracle {
    /// Must be deterministic in (sample id, step, attempt).
    fn respond(&self, sample_id: &str, step: &StepRecord, attempt: u32) -> AgentResponse;
}

/// Fixture responder with a known per-sample success probability: attempt
/// draws are seeded, and a miss answers with the gold list plus one bogus
/// call, which the whole-list matcher always rejects.
pub struct ScriptedResponder {
    pub probs: BTreeMap<String, f64>,
    pub seed: u64,
}

impl GraderOracle for ScriptedResponder {
    fn respond(&self, sample_id: &str, step: &StepRecord, attempt: u32) -> AgentResponse {
        let gold = step.gold.clone().unwrap_or_else(|| AgentResponse {
            think: "none".into(),
            evaluation_previous_goal: "Unknown".into(),
            memory: "none".into(),
            next_goal: "none".into(),
            action: vec![Action::GoBack],
        });
        let p = self.probs.get(sample_id).copied().unwrap_or(0.5);
        let seed = derive_seed(self.seed, &[stable_hash64(sample_id.as_bytes()), attempt as u64]);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        if uniform_f64(&mut rng) < p {
            gold
        } else {
            let mut wrong = gold;
            wrong.action.push(Action::GoBack);
            wrong
        }
    }
}

/// Adapter over a trained policy: each attempt samples once with its own
/// seed, so repeated querying measures the policy's real hit rate.
pub struct PolicyResponder {
    pub policy: crate::grpo::ToyPolicy,
    pub seed: u64,
    pub max_tokens: usize,
}

impl GraderOracle for PolicyResponder {
    fn respond(&self, sample_id: &str, step: &StepRecord, attempt: u32) -> AgentResponse {
        let key = bucket_key(&step.question, &step.dom.url, step.dom.viewport_start, step.step_index);
        let bucket = self.policy.vocab.bucket_id(&key);
        let seed = derive_seed(self.seed, &[stable_hash64(sample_id.as_bytes()), attempt as u64]);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let tokens = self.policy.sample_sequence(bucket, &mut rng, self.max_tokens);
        let raw = self.policy.render_raw(&tokens);
        crate::parser::parse_response(&raw, &crate::parser::ParseOptions::default()).unwrap_or(
            AgentResponse {
                think: "invalid rollout".into(),
                evaluation_previous_goal: "Unknown".into(),
                memory: "invalid rollout".into(),
                next_goal: "none".into(),
                action: Vec::new(),
            },
        )
    }
}

/// Answers each step `k` times and bands the trajectory by accuracy: every
/// attempt correct is easy, under one in five is difficult, anything else
/// moderate. An attempt is correct when every step's answer matches the
/// gold action list exactly under the whole-list matcher.
pub fn grade_difficulty(
    traj: &Trajectory,
    oracle: &dyn GraderOracle,
    k: u32,
    f1_threshold: f64,
) -> Result<Difficulty, PipelineError> {
    if k == 0 {
        return Err(PipelineError::Grader("k must be at least 1".to_string()));
    }
    let mut correct = 0u32;
    for attempt in 0..k {
        let all = traj.steps.iter().all(|step| {
            let Some(gold) = &step.gold else { return false };
            let resp = oracle.respond(&traj.id, step, attempt);
            stepwise_accuracy(&resp.action, &gold.action, Stage::Later, f1_threshold) == 1.0
        });
        if all {
            correct += 1;
        }
    }
    let acc = correct as f64 / k as f64;
    Ok(if acc == 1.0 {
        Difficulty::Easy
    } else if acc < 0.2 {
        Difficulty::Difficult
    } else {
        Difficulty::Moderate
    })
}

/// Tool-count rule: one call is easy, two moderate, more difficult. Graded
/// per trajectory over the gold calls of all steps.
pub fn grade_by_rule(traj: &Trajectory) -> Difficulty {
    let tools: usize = traj
        .steps
        .iter()
        .filter_map(|s| s.gold.as_ref())
        .map(|g| g.action.len())
        .sum();
    match tools {
        0..=1 => Difficulty::Easy,
        2 => Difficulty::Moderate,
        _ => Difficulty::Difficult,
    }
}

fn level_distribution(corpus: &[Trajectory]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for traj in corpus {
        let key = serde_json::to_value(traj.difficulty)
            .expect("difficulty encodes")
            .as_str()
            .expect("difficulty is a string")
            .to_string();
        *out.entry(key).or_insert(0) += 1;
    }
    out
}

/// Runs the selected stages in order and balances the books per stage.
/// Grading with the oracle grader requires a responder.
pub fn run_pipeline(
    corpus: Vec<Trajectory>,
    stages: &[StageName],
    cfg: &PipelineConfig,
    responder: Option<&dyn GraderOracle>,
) -> Result<(Vec<Trajectory>, PipelineReport), PipelineError> {
    cfg.validate().map_err(PipelineError::Grader)?;
    let mut corpus = corpus;
    let mut report = PipelineReport {
        schema_version: 1,
        stages: Vec::new(),
        level_distribution: BTreeMap::new(),
    };
    for stage in stages {
        let mut counts = StageCounts::new(*stage, corpus.len());
        match stage {
            StageName::Filter => {
                let (kept, dropped) = filter_trajectories(corpus);
                counts.kept = kept.len();
                for (_, reason) in &dropped {
                    counts.drop(reason);
                }
                corpus = kept;
            }
            StageName::Clean => {
                corpus = corpus
                    .into_iter()
                    .map(|t| clean_steps(t, &cfg.failure_markers))
                    .collect();
                counts.kept = corpus.len();
            }
            StageName::Refine => {
                corpus = corpus
                    .into_iter()
                    .map(|t| {
                        let (t, ok) = refine(t, &cfg.example_open, &cfg.example_close);
                        if !ok {
                            counts.flagged.push(t.id.clone());
                        }
                        t
                    })
                    .collect();
                counts.kept = corpus.len();
            }
            StageName::Augment => {
                let before = corpus.len();
                let (next, added) = augment(corpus, cfg);
                corpus = next;
                counts.kept = before;
                counts.added = added;
            }
            StageName::Chain => {
                let (next, chain_counts) = chain_stage(corpus)?;
                counts = chain_counts;
                corpus = next;
            }
            StageName::Grade => {
                for traj in &mut corpus {
                    traj.difficulty = match cfg.grader {
                        GraderKind::Rule => grade_by_rule(traj),
                        GraderKind::Oracle => {
                            let oracle = responder.ok_or_else(|| {
                                PipelineError::Grader(
                                    "oracle grading needs a responder".to_string(),
                                )
                            })?;
                            grade_difficulty(traj, oracle, cfg.grade_k, cfg.f1_threshold)?
                        }
                    };
                }
                counts.kept = corpus.len();
            }
        }
        debug_assert_eq!(counts.input, counts.kept + counts.dropped, "{}", counts.stage);
        report.stages.push(counts);
    }
    report.level_distribution = level_distribution(&corpus);
    Ok((corpus, report))
}
