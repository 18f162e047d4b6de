//! `riskforge`: score agent predictions, drive online episodes, train the
//! toy policy, curate trajectory corpora, and emit analysis curves, all from
//! one binary over the JSON fixture formats the core library defines.
//!
//! Settings resolve as flags > `RISKFORGE_*` environment variables >
//! `--config` file > defaults, and every report artifact carries the hash of
//! the resolved settings. Exit codes: 0 success, 1 usage, 2 input or schema
//! problems, 3 broken environment fixtures.

mod commands;
mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use riskforge_core::env::EnvError;
use riskforge_core::eval::EvalError;
use riskforge_core::grpo::TrainError;
use riskforge_core::model::ModelError;
use riskforge_core::pipeline::PipelineError;

/// Command failure with its process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: unknown names, contradictory or out-of-range flags.
    Usage(String),
    /// Unreadable or malformed input data, or an unwritable output.
    Schema(String),
    /// Site, task, or state fixtures that do not hold together.
    Fixture(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Schema(_) => 2,
            Failure::Fixture(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Schema(m) | Failure::Fixture(m) => m,
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Failure {
        match e {
            EvalError::Env(inner) => Failure::Fixture(inner.to_string()),
            EvalError::UnknownFormat(_) => Failure::Usage(e.to_string()),
            _ => Failure::Schema(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Failure {
        Failure::Schema(e.to_string())
    }
}

impl From<EnvError> for Failure {
    fn from(e: EnvError) -> Failure {
        Failure::Fixture(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Failure {
        match e {
            TrainError::Config(m) => Failure::Usage(m),
            TrainError::Env(inner) => Failure::Fixture(inner.to_string()),
            _ => Failure::Schema(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Failure {
        match e {
            PipelineError::Grader(m) => Failure::Usage(m),
            _ => Failure::Schema(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "riskforge",
    version,
    about = "Score, run, train, and curate simulated web-agent sessions",
    propagate_version = true
)]
struct Cli {
    #[command(flatten)]
    globals: GlobalArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON settings file; flags and RISKFORGE_* variables override it (default: none)
    #[arg(long, global = true, env = "RISKFORGE_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root random seed; unset keeps component defaults (runs and pipeline 0, training 7)
    #[arg(long, global = true, env = "RISKFORGE_SEED")]
    seed: Option<u64>,
    /// Upper bound on concurrently processed episodes or samples (default: 1)
    #[arg(long, global = true, env = "RISKFORGE_WORKERS")]
    workers: Option<usize>,
    /// Strict lower bound a tool-call F1 must exceed to count as matched (default: 0.5)
    #[arg(long, global = true, env = "RISKFORGE_F1_THRESHOLD")]
    f1_threshold: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Score one-step predictions against a gold bench
    ScoreSingle(ScoreArgs),
    /// Score multi-step predictions teacher-forced against a gold bench
    ScoreMulti(ScoreArgs),
    /// Drive an agent through every task of a site and report the rates
    RunOnline(RunOnlineArgs),
    /// Optimize the toy policy on environment tasks or a curated corpus
    Train(TrainArgs),
    /// Run curation stages over a trajectory corpus
    Pipeline(PipelineArgs),
    /// Re-band trajectory difficulty with the rule or oracle grader
    Grade(GradeArgs),
    /// Emit process-weight curves or tabulate a training report as CSV
    Curves(CurvesArgs),
    /// Apply one action list to an environment state and print what happened
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Gold bench: trajectory JSONL with gold responses on every step
    #[arg(long, value_name = "FILE")]
    gold: PathBuf,
    /// Predictions JSONL, one {"id", "step_index"?, "response_raw_text"} per line
    #[arg(long, value_name = "FILE")]
    predictions: PathBuf,
    /// Report file to write
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Report format: json, csv, or markdown (default: json)
    #[arg(long, env = "RISKFORGE_FORMAT")]
    format: Option<String>,
    /// Also write per-sample reward breakdowns to <out>.breakdown.jsonl (default: off)
    #[arg(long)]
    emit_breakdown: bool,
}

#[derive(Args, Debug)]
struct RunOnlineArgs {
    /// Site fixture JSON
    #[arg(long, value_name = "FILE")]
    site: PathBuf,
    /// Task file, one task JSON per line
    #[arg(long, value_name = "FILE")]
    tasks: PathBuf,
    /// Agent: oracle, policy:<checkpoint>, or replay:<episodes.jsonl> (default: oracle)
    #[arg(long)]
    agent: Option<String>,
    /// Response turns allowed per episode (default: 20)
    #[arg(long, env = "RISKFORGE_MAX_STEPS")]
    max_steps: Option<u32>,
    /// Report file to write
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Episode log JSONL (default: <out>.episodes.jsonl)
    #[arg(long, value_name = "FILE")]
    episodes: Option<PathBuf>,
    /// Report format: json, csv, or markdown (default: json)
    #[arg(long, env = "RISKFORGE_FORMAT")]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Site fixture; training prompts come from its tasks (requires --tasks)
    #[arg(long, requires = "tasks", conflicts_with = "data", value_name = "FILE")]
    site: Option<PathBuf>,
    /// Task file for --site
    #[arg(long, requires = "site", value_name = "FILE")]
    tasks: Option<PathBuf>,
    /// Curated trajectory JSONL to train on instead of a site
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Where to write the trained policy checkpoint
    #[arg(long, value_name = "FILE")]
    out_checkpoint: PathBuf,
    /// Where to write the training report JSON
    #[arg(long, value_name = "FILE")]
    out_report: PathBuf,
    /// Continue from this checkpoint; epoch numbering keeps counting (default: fresh start)
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    /// schedule = positional mean first, strict later; binary-only = strict throughout (default: schedule)
    #[arg(long)]
    stage: Option<String>,
    /// Rollouts sampled per prompt (default: 8)
    #[arg(long, env = "RISKFORGE_GROUP_SIZE")]
    group_size: Option<usize>,
    /// Surrogate ratio clipping range (default: 0.2)
    #[arg(long, env = "RISKFORGE_CLIP_EPSILON")]
    clip_epsilon: Option<f64>,
    /// KL penalty coefficient (default: 0.04)
    #[arg(long, env = "RISKFORGE_KL_COEF")]
    kl_coef: Option<f64>,
    /// Ascent step size (default: 1e-6; desk-scale smoke runs want around 60)
    #[arg(long, env = "RISKFORGE_LEARNING_RATE")]
    learning_rate: Option<f64>,
    /// Training epochs for this run (default: 2)
    #[arg(long, env = "RISKFORGE_EPOCHS")]
    epochs: Option<u32>,
    /// Optimization iterations per epoch (default: 60)
    #[arg(long, env = "RISKFORGE_ITERATIONS")]
    iterations: Option<u32>,
    /// Longest sampled response, in policy tokens (default: 24)
    #[arg(long)]
    max_tokens: Option<usize>,
    /// First epoch index scored with the strict whole-list accuracy (default: 1)
    #[arg(long)]
    later_after_epoch: Option<u32>,
    /// Format reward weight (default: 0.1)
    #[arg(long, env = "RISKFORGE_ALPHA")]
    alpha: Option<f64>,
    /// Accuracy reward weight (default: 0.9)
    #[arg(long, env = "RISKFORGE_BETA")]
    beta: Option<f64>,
    /// Process-weight floor (default: 0.7)
    #[arg(long, env = "RISKFORGE_GAMMA")]
    gamma: Option<f64>,
    /// Process-weight steepness (default: 4)
    #[arg(long, env = "RISKFORGE_DELTA")]
    delta: Option<f64>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Raw trajectory corpus JSONL
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Curated corpus JSONL to write
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Comma-separated stages in execution order (default: filter,clean,refine,augment,chain,grade)
    #[arg(long)]
    stages: Option<String>,
    /// Stage report JSON (default: <out>.report.json)
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Pipeline settings JSON; replaces the config file's pipeline section (default: none)
    #[arg(long, value_name = "FILE")]
    pipeline_config: Option<PathBuf>,
    /// Difficulty grader for the grade stage: rule or oracle (default: rule)
    #[arg(long)]
    grader: Option<String>,
    /// Oracle grader attempts per trajectory (default: 5)
    #[arg(long)]
    grade_k: Option<u32>,
    /// Per-trajectory success probabilities JSON for the scripted responder
    #[arg(long, value_name = "FILE")]
    probs: Option<PathBuf>,
    /// Policy checkpoint answering the oracle grader's attempts
    #[arg(long, value_name = "FILE", conflicts_with = "probs")]
    policy: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradeArgs {
    /// Trajectory corpus JSONL to grade
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Graded corpus JSONL to write
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Stage report JSON (default: <out>.report.json)
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Pipeline settings JSON; replaces the config file's pipeline section (default: none)
    #[arg(long, value_name = "FILE")]
    pipeline_config: Option<PathBuf>,
    /// Difficulty grader: rule or oracle (default: rule)
    #[arg(long)]
    grader: Option<String>,
    /// Oracle grader attempts per trajectory (default: 5)
    #[arg(long)]
    k: Option<u32>,
    /// Per-trajectory success probabilities JSON for the scripted responder
    #[arg(long, value_name = "FILE")]
    probs: Option<PathBuf>,
    /// Policy checkpoint answering the oracle grader's attempts
    #[arg(long, value_name = "FILE", conflicts_with = "probs")]
    policy: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    /// What to tabulate: process-weight or training-report (default: process-weight)
    #[arg(long)]
    what: Option<String>,
    /// Points per process-weight curve (default: 100)
    #[arg(long)]
    n: Option<u32>,
    /// Training report JSON to tabulate when --what=training-report
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// CSV file to write
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Site fixture JSON
    #[arg(long, value_name = "FILE")]
    site: PathBuf,
    /// Task file, one task JSON per line
    #[arg(long, value_name = "FILE")]
    tasks: PathBuf,
    /// Task id within --tasks (default: the first task)
    #[arg(long)]
    task: Option<String>,
    /// Environment state JSON from an earlier --out-state (default: episode start)
    #[arg(long, value_name = "FILE")]
    state: Option<PathBuf>,
    /// JSON action list to apply, inline or @file
    #[arg(long, value_name = "JSON")]
    actions: String,
    /// Where to write the post-step state (default: not written)
    #[arg(long, value_name = "FILE")]
    out_state: Option<PathBuf>,
}

fn main() {
    // Die quietly when stdout's reader goes away (`riskforge ... | head`)
    // instead of panicking on the broken pipe.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            failure.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let g = &cli.globals;
    match cli.cmd {
        Cmd::ScoreSingle(args) => commands::score(g, args, commands::ScoreKind::Single),
        Cmd::ScoreMulti(args) => commands::score(g, args, commands::ScoreKind::Multi),
        Cmd::RunOnline(args) => commands::run_online(g, args),
        Cmd::Train(args) => commands::train(g, args),
        Cmd::Pipeline(args) => commands::pipeline(g, args),
        Cmd::Grade(args) => commands::grade(g, args),
        Cmd::Curves(args) => commands::curves(g, args),
        Cmd::Simulate(args) => commands::simulate(g, args),
    }
}
