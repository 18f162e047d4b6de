//! One function per subcommand. Each resolves settings first, so every
//! report artifact it writes carries the same resolved-config hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use riskforge_core::env::{load_site, load_tasks, EnvState, Simulator};
use riskforge_core::eval::{
    emit_offline, emit_online, episodes_to_string, read_episodes, read_predictions,
    run_online_parallel, score_offline_multi_with, score_offline_single_with, OracleAgent,
    PolicyAgent, Prediction, ReplayAgent, RunOptions,
};
use riskforge_core::grpo::{
    dataset_samples, env_samples, load_checkpoint, save_checkpoint, train_from, ToyPolicy,
    TrainingReport,
};
use riskforge_core::model::{read_trajectories, write_trajectories, Action, Trajectory};
use riskforge_core::pipeline::{
    run_pipeline, GraderKind, GraderOracle, PolicyResponder, ScriptedResponder, StageName,
    ALL_STAGES,
};
use riskforge_core::reward::{process_weight, score_rollout, RewardBreakdown, RewardConfig, Stage};

use crate::settings::{self, read_json, Overrides, Settings};
use crate::{
    CurvesArgs, Failure, GlobalArgs, GradeArgs, PipelineArgs, RunOnlineArgs, ScoreArgs,
    SimulateArgs, TrainArgs,
};

pub enum ScoreKind {
    Single,
    Multi,
}

/// `<out>.suffix`, next to the main artifact.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", out.display()))
}

pub fn score(g: &GlobalArgs, args: ScoreArgs, kind: ScoreKind) -> Result<(), Failure> {
    let ov = Overrides { format: args.format.clone(), ..Overrides::default() };
    let s = settings::resolve(g.config.as_deref(), g.seed, g.workers, g.f1_threshold, &ov)?;
    let bench = read_trajectories(&args.gold)?;
    let preds = read_predictions(&args.predictions)?;
    let result = match kind {
        ScoreKind::Single => {
            score_offline_single_with(&preds, &bench, s.reward.f1_threshold, s.workers)?
        }
        ScoreKind::Multi => {
            score_offline_multi_with(&preds, &bench, s.reward.f1_threshold, s.workers)?
        }
    };
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    settings::write_text(&args.out, &emit_offline(&result, s.format, &s.hash))?;
    if args.emit_breakdown {
        let path = sibling(&args.out, "breakdown.jsonl");
        write_breakdowns(&path, &bench, &preds, matches!(kind, ScoreKind::Multi), &s)?;
        println!("breakdowns: {}", path.display());
    }
    println!(
        "{} of {} correct ({:.1}%), report: {}",
        result.correct,
        result.total,
        100.0 * result.overall_accuracy,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BreakdownHeader<'a> {
    schema_version: u32,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct BreakdownLine<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    step_index: Option<u32>,
    breakdown: RewardBreakdown,
}

/// Per-sample reward decompositions for every (bench step, prediction) pair
/// that was actually scored. The stage is forced to the strict whole-list
/// rule so `step_acc` agrees with the verdicts in the report.
fn write_breakdowns(
    path: &Path,
    bench: &[Trajectory],
    preds: &[Prediction],
    multi: bool,
    s: &Settings,
) -> Result<(), Failure> {
    let mut cfg = s.reward.clone();
    cfg.stage = Stage::Later;
    let mut by_key: BTreeMap<(&str, u32), &str> = BTreeMap::new();
    for pred in preds {
        by_key.insert(
            (pred.id.as_str(), pred.step_index.unwrap_or(1)),
            pred.response_raw_text.as_str(),
        );
    }
    let header = BreakdownHeader { schema_version: 1, config_hash: &s.hash };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    for traj in bench {
        for step in &traj.steps {
            if let Some(raw) = by_key.get(&(traj.id.as_str(), step.step_index)) {
                let line = BreakdownLine {
                    id: &traj.id,
                    step_index: multi.then_some(step.step_index),
                    breakdown: score_rollout(step, traj.difficulty, raw, &cfg),
                };
                text.push_str(&serde_json::to_string(&line).expect("line serializes"));
                text.push('\n');
            }
        }
    }
    settings::write_text(path, &text)
}

pub fn run_online(g: &GlobalArgs, args: RunOnlineArgs) -> Result<(), Failure> {
    let ov = Overrides {
        format: args.format.clone(),
        max_steps: args.max_steps,
        ..Overrides::default()
    };
    let s = settings::resolve(g.config.as_deref(), g.seed, g.workers, g.f1_threshold, &ov)?;
    let site = load_site(&args.site)?;
    let tasks = load_tasks(&args.tasks)?;
    let opts = RunOptions { max_steps: s.max_steps, seed: s.seed };
    let spec = args.agent.clone().unwrap_or_else(|| "oracle".to_string());
    let result = if spec == "oracle" {
        run_online_parallel(OracleAgent::default, &site, &tasks, &opts, s.workers)?
    } else if let Some(path) = spec.strip_prefix("policy:") {
        let policy = ToyPolicy::from_checkpoint(load_checkpoint(path)?)?;
        let max_tokens = s.grpo.max_tokens;
        run_online_parallel(
            || PolicyAgent { policy: policy.clone(), max_tokens },
            &site,
            &tasks,
            &opts,
            s.workers,
        )?
    } else if let Some(path) = spec.strip_prefix("replay:") {
        let episodes = read_episodes(path)?;
        ReplayAgent::from_episodes(&episodes)?;
        run_online_parallel(
            || ReplayAgent::from_episodes(&episodes).expect("validated above"),
            &site,
            &tasks,
            &opts,
            s.workers,
        )?
    } else {
        return Err(Failure::Usage(format!(
            "unknown agent `{spec}`; expected oracle, policy:<checkpoint>, or replay:<episodes.jsonl>"
        )));
    };
    let episodes_path =
        args.episodes.clone().unwrap_or_else(|| sibling(&args.out, "episodes.jsonl"));
    settings::write_text(&episodes_path, &episodes_to_string(&result.episodes))?;
    settings::write_text(&args.out, &emit_online(&result, s.format, &s.hash))?;
    println!(
        "{} tasks: completion {:.1}%, success {:.1}%, report: {}, episodes: {}",
        result.total_tasks,
        100.0 * result.completion_rate,
        100.0 * result.success_rate_unconditional,
        args.out.display(),
        episodes_path.display()
    );
    Ok(())
}

pub fn train(g: &GlobalArgs, args: TrainArgs) -> Result<(), Failure> {
    let ov = Overrides {
        alpha: args.alpha,
        beta: args.beta,
        gamma: args.gamma,
        delta: args.delta,
        group_size: args.group_size,
        clip_epsilon: args.clip_epsilon,
        kl_coef: args.kl_coef,
        learning_rate: args.learning_rate,
        epochs: args.epochs,
        iterations: args.iterations,
        max_tokens: args.max_tokens,
        later_after_epoch: args.later_after_epoch,
        stage: args.stage.clone(),
        ..Overrides::default()
    };
    let s = settings::resolve(g.config.as_deref(), g.seed, g.workers, g.f1_threshold, &ov)?;
    let samples = if let Some(data) = &args.data {
        dataset_samples(&read_trajectories(data)?)
    } else if let (Some(site_path), Some(tasks_path)) = (&args.site, &args.tasks) {
        let site = load_site(site_path)?;
        let tasks = load_tasks(tasks_path)?;
        env_samples(&site, &tasks)?
    } else {
        return Err(Failure::Usage("train needs --site with --tasks, or --data".to_string()));
    };
    let resume = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let done = ckpt.epochs_completed;
            Some((ToyPolicy::from_checkpoint(ckpt)?, done))
        }
        None => None,
    };
    let prior_epochs = resume.as_ref().map(|&(_, done)| done).unwrap_or(0);
    let (policy, report) = train_from(&samples, &s.grpo, resume)?;
    let total_epochs = prior_epochs + s.grpo.epochs;
    save_checkpoint(&args.out_checkpoint, &policy.to_checkpoint(&s.hash, total_epochs))?;
    settings::write_json_artifact(&args.out_report, &s, &report)?;
    println!(
        "trained {} samples for {} epochs (total {}), final mean reward {:.4}, checkpoint: {}, report: {}",
        report.sample_count,
        s.grpo.epochs,
        total_epochs,
        report.final_mean_reward,
        args.out_checkpoint.display(),
        args.out_report.display()
    );
    Ok(())
}

fn parse_stages(spec: Option<&str>) -> Result<Vec<StageName>, Failure> {
    let Some(spec) = spec else {
        return Ok(ALL_STAGES.to_vec());
    };
    if spec.trim().is_empty() {
        return Err(Failure::Usage("stage list is empty".to_string()));
    }
    let mut out = Vec::new();
    for name in spec.split(',') {
        out.push(match name.trim() {
            "filter" => StageName::Filter,
            "clean" => StageName::Clean,
            "refine" => StageName::Refine,
            "augment" => StageName::Augment,
            "chain" => StageName::Chain,
            "grade" => StageName::Grade,
            other => {
                return Err(Failure::Usage(format!(
                    "unknown stage `{other}`; expected filter, clean, refine, augment, chain, or grade"
                )));
            }
        });
    }
    Ok(out)
}

/// --probs and --policy are responders for the oracle grader, so giving one
/// selects it; naming the rule grader alongside one is contradictory.
fn effective_grader(
    flag: &Option<String>,
    has_responder: bool,
) -> Result<Option<String>, Failure> {
    match (flag.as_deref(), has_responder) {
        (None, true) => Ok(Some("oracle".to_string())),
        (Some("rule"), true) => Err(Failure::Usage(
            "--probs and --policy apply to the oracle grader; drop them or pass --grader oracle"
                .to_string(),
        )),
        _ => Ok(flag.clone()),
    }
}

fn build_responder(
    s: &Settings,
    probs: Option<&Path>,
    policy: Option<&Path>,
    needed: bool,
) -> Result<Option<Box<dyn GraderOracle>>, Failure> {
    match (probs, policy) {
        (Some(probs_path), None) => {
            let table: BTreeMap<String, f64> = read_json(probs_path, "probability table")?;
            Ok(Some(Box::new(ScriptedResponder { probs: table, seed: s.pipeline.seed })))
        }
        (None, Some(ckpt_path)) => {
            let policy = ToyPolicy::from_checkpoint(load_checkpoint(ckpt_path)?)?;
            Ok(Some(Box::new(PolicyResponder {
                policy,
                seed: s.pipeline.seed,
                max_tokens: s.grpo.max_tokens,
            })))
        }
        (None, None) if needed => Err(Failure::Usage(
            "oracle grading needs a responder; pass --probs or --policy".to_string(),
        )),
        (None, None) => Ok(None),
        (Some(_), Some(_)) => {
            Err(Failure::Usage("--probs and --policy are mutually exclusive".to_string()))
        }
    }
}

fn run_stages(
    s: &Settings,
    corpus: Vec<Trajectory>,
    stages: &[StageName],
    probs: Option<&Path>,
    policy: Option<&Path>,
    out: &Path,
    report_path: Option<PathBuf>,
) -> Result<(), Failure> {
    let needs_oracle =
        s.pipeline.grader == GraderKind::Oracle && stages.contains(&StageName::Grade);
    let responder = build_responder(s, probs, policy, needs_oracle)?;
    let input_len = corpus.len();
    let (curated, report) = run_pipeline(corpus, stages, &s.pipeline, responder.as_deref())?;
    write_trajectories(out, &curated)?;
    let report_path = report_path.unwrap_or_else(|| sibling(out, "report.json"));
    settings::write_json_artifact(&report_path, s, &report)?;
    for stage in &report.stages {
        println!(
            "{}: {} in, {} kept, {} dropped, {} added",
            stage.stage, stage.input, stage.kept, stage.dropped, stage.added
        );
    }
    let distribution = report
        .level_distribution
        .iter()
        .map(|(level, count)| format!("{level} {count}"))
        .collect::<Vec<_>>()
        .join(", ");
    println!(
        "{input_len} -> {} trajectories ({distribution}), corpus: {}, report: {}",
        curated.len(),
        out.display(),
        report_path.display()
    );
    Ok(())
}

pub fn pipeline(g: &GlobalArgs, args: PipelineArgs) -> Result<(), Failure> {
    let grader =
        effective_grader(&args.grader, args.probs.is_some() || args.policy.is_some())?;
    let ov = Overrides {
        pipeline_config: args.pipeline_config.clone(),
        grader,
        grade_k: args.grade_k,
        ..Overrides::default()
    };
    let s = settings::resolve(g.config.as_deref(), g.seed, g.workers, g.f1_threshold, &ov)?;
    let corpus = read_trajectories(&args.input)?;
    let stages = parse_stages(args.stages.as_deref())?;
    run_stages(
        &s,
        corpus,
        &stages,
        args.probs.as_deref(),
        args.policy.as_deref(),
        &args.out,
        args.report,
    )
}

pub fn grade(g: &GlobalArgs, args: GradeArgs) -> Result<(), Failure> {
    let grader =
        effective_grader(&args.grader, args.probs.is_some() || args.policy.is_some())?;
    let ov = Overrides {
        pipeline_config: args.pipeline_config.clone(),
        grader,
        grade_k: args.k,
        ..Overrides::default()
    };
    let s = settings::resolve(g.config.as_deref(), g.seed, g.workers, g.f1_threshold, &ov)?;
    let corpus = read_trajectories(&args.input)?;
    run_stages(
        &s,
        corpus,
        &[StageName::Grade],
        args.probs.as_deref(),
        args.policy.as_deref(),
        &args.out,
        args.report,
    )
}

/// The five published parameterizations of the process-weight curve.
const CURVE_PRESETS: [(&str, f64, f64); 5] = [
    ("g1.0", 1.0, 4.0),
    ("g0.4_d4", 0.4, 4.0),
    ("g0.7_d4", 0.7, 4.0),
    ("g0.7_d1", 0.7, 1.0),
    ("g0.7_d7", 0.7, 7.0),
];

fn process_weight_csv(n: u32, s: &Settings) -> String {
    let mut out = format!("# config_hash={}\n", s.hash);
    out.push_str("position,frac");
    for (name, _, _) in CURVE_PRESETS {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 1..=n {
        let frac = (i - 1) as f64 / (n - 1) as f64;
        out.push_str(&format!("{i},{frac:.6}"));
        for (_, gamma, delta) in CURVE_PRESETS {
            let cfg =
                RewardConfig { gamma, delta, normalize_endpoints: false, ..s.reward.clone() };
            out.push_str(&format!(",{:.6}", process_weight(i, n, &cfg)));
        }
        out.push('\n');
    }
    out
}

fn training_csv(report: &TrainingReport, s: &Settings) -> String {
    let mut out = format!("# config_hash={}\n", s.hash);
    out.push_str("epoch,iteration,stage,mean_reward,format_rate,mean_kl,objective\n");
    for it in &report.iterations {
        let stage = match it.stage {
            Stage::Early => "early",
            Stage::Later => "later",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            it.epoch, it.iteration, stage, it.mean_reward, it.format_rate, it.mean_kl, it.objective
        ));
    }
    out
}

pub fn curves(g: &GlobalArgs, args: CurvesArgs) -> Result<(), Failure> {
    let s = settings::resolve(
        g.config.as_deref(),
        g.seed,
        g.workers,
        g.f1_threshold,
        &Overrides::default(),
    )?;
    let what = args.what.as_deref().unwrap_or("process-weight");
    let csv = match what {
        "process-weight" => {
            let n = args.n.unwrap_or(100);
            if n < 2 {
                return Err(Failure::Usage("--n must be at least 2".to_string()));
            }
            process_weight_csv(n, &s)
        }
        "training-report" => {
            let path = args.report.as_ref().ok_or_else(|| {
                Failure::Usage("--what=training-report needs --report".to_string())
            })?;
            // Accepts both the bare report and the envelope `train` writes.
            let value: serde_json::Value = read_json(path, "training report")?;
            let inner = value.get("result").cloned().unwrap_or(value);
            let report: TrainingReport = serde_json::from_value(inner)
                .map_err(|e| Failure::Schema(format!("training report `{}`: {e}", path.display())))?;
            training_csv(&report, &s)
        }
        other => {
            return Err(Failure::Usage(format!(
                "unknown curve `{other}`; expected process-weight or training-report"
            )));
        }
    };
    settings::write_text(&args.out, &csv)?;
    println!("curve data: {}", args.out.display());
    Ok(())
}

pub fn simulate(g: &GlobalArgs, args: SimulateArgs) -> Result<(), Failure> {
    let s = settings::resolve(
        g.config.as_deref(),
        g.seed,
        g.workers,
        g.f1_threshold,
        &Overrides::default(),
    )?;
    let _ = &s;
    let site = load_site(&args.site)?;
    let tasks = load_tasks(&args.tasks)?;
    site.validate()?;
    let task = match &args.task {
        Some(id) => tasks.iter().find(|t| &t.id == id).ok_or_else(|| {
            Failure::Usage(format!("no task `{id}` in {}", args.tasks.display()))
        })?,
        None => tasks
            .first()
            .ok_or_else(|| Failure::Fixture("task file is empty".to_string()))?,
    };
    task.validate_against(&site)?;
    let actions_text = match args.actions.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Failure::Schema(format!("cannot read action file `{path}`: {e}")))?,
        None => args.actions.clone(),
    };
    let actions: Vec<Action> = serde_json::from_str(&actions_text)
        .map_err(|e| Failure::Schema(format!("action list: {e}")))?;
    let mut sim = match &args.state {
        Some(path) => {
            let state: EnvState = read_json(path, "state file")?;
            Simulator { site: &site, task, state }
        }
        None => Simulator::reset(&site, task),
    };
    let outcomes = sim.step(&actions)?;
    for outcome in &outcomes {
        if outcome.success {
            println!("ok: {}", outcome.message);
        } else {
            println!("failed: {}", outcome.message);
        }
    }
    let snapshot = sim.observe();
    println!("{}", serde_json::to_string_pretty(&snapshot).expect("snapshot serializes"));
    let judgement = sim.judge();
    if judgement.reasons.is_empty() {
        println!("completed: {}, success: {}", judgement.completed, judgement.success);
    } else {
        println!(
            "completed: {}, success: {} ({})",
            judgement.completed,
            judgement.success,
            judgement.reasons.join("; ")
        );
    }
    if let Some(out) = &args.out_state {
        let mut text = serde_json::to_string_pretty(&sim.state).expect("state serializes");
        text.push('\n');
        settings::write_text(out, &text)?;
        println!("state: {}", out.display());
    }
    Ok(())
}
