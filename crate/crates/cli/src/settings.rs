//! Settings resolution: flags beat `RISKFORGE_*` environment variables beat
//! the `--config` file beat built-in defaults. Everything a subcommand's
//! output can depend on ends up in one [`Settings`] value whose hash is
//! embedded in every report artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use riskforge_core::eval::{ReportFormat, DEFAULT_ONLINE_MAX_STEPS};
use riskforge_core::grpo::GrpoConfig;
use riskforge_core::pipeline::{GraderKind, PipelineConfig};
use riskforge_core::reward::{LevelWeights, RewardConfig, Stage};
use riskforge_core::util::sha256_hex;

use crate::Failure;

/// Shape of the `--config` file. Sections mirror the component configs
/// field-for-field but keep every entry optional, so a file only pins what
/// it names. Unknown keys are rejected rather than ignored.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub max_steps: Option<u32>,
    pub workers: Option<usize>,
    pub format: Option<String>,
    pub reward: RewardSection,
    pub grpo: GrpoSection,
    /// Full pipeline section; absent fields fall back to stage defaults.
    pub pipeline: Option<PipelineConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub f1_threshold: Option<f64>,
    pub stage: Option<Stage>,
    pub normalize_endpoints: Option<bool>,
    pub allow_empty_think: Option<bool>,
    pub level_weights: Option<LevelWeights>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSection {
    pub group_size: Option<usize>,
    pub clip_epsilon: Option<f64>,
    pub kl_coef: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<u32>,
    pub iterations_per_epoch: Option<u32>,
    pub max_tokens: Option<usize>,
    pub seed: Option<u64>,
    pub later_stage_after_epoch: Option<u32>,
}

/// Per-subcommand flag values that participate in resolution. Subcommands
/// fill only the fields they expose; the rest stay `None`.
#[derive(Debug, Default)]
pub struct Overrides {
    pub format: Option<String>,
    pub max_steps: Option<u32>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub group_size: Option<usize>,
    pub clip_epsilon: Option<f64>,
    pub kl_coef: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<u32>,
    pub iterations: Option<u32>,
    pub max_tokens: Option<usize>,
    pub later_after_epoch: Option<u32>,
    pub stage: Option<String>,
    pub pipeline_config: Option<PathBuf>,
    pub grader: Option<String>,
    pub grade_k: Option<u32>,
}

/// Fully resolved invocation settings. `hash` covers `seed`, `max_steps`,
/// and the three component configs; `workers` and report `format` are
/// excluded on purpose, so changing either never changes what a run means.
#[derive(Debug)]
pub struct Settings {
    pub seed: u64,
    pub max_steps: u32,
    pub workers: usize,
    pub format: ReportFormat,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub pipeline: PipelineConfig,
    pub hash: String,
    pub echo: serde_json::Value,
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    seed: u64,
    max_steps: u32,
    reward: &'a RewardConfig,
    grpo: &'a GrpoConfig,
    pipeline: &'a PipelineConfig,
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(
    path: &Path,
    what: &str,
) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Schema(format!("cannot read {what} `{}`: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Schema(format!("{what} `{}`: {e}", path.display())))
}

pub fn resolve(
    config_path: Option<&Path>,
    seed_flag: Option<u64>,
    workers_flag: Option<usize>,
    f1_flag: Option<f64>,
    ov: &Overrides,
) -> Result<Settings, Failure> {
    let file: FileConfig = match config_path {
        Some(path) => read_json(path, "config file")?,
        None => FileConfig::default(),
    };

    let mut reward = RewardConfig::default();
    let fr = &file.reward;
    if let Some(v) = fr.alpha {
        reward.alpha = v;
    }
    if let Some(v) = fr.beta {
        reward.beta = v;
    }
    if let Some(v) = fr.gamma {
        reward.gamma = v;
    }
    if let Some(v) = fr.delta {
        reward.delta = v;
    }
    if let Some(v) = fr.f1_threshold {
        reward.f1_threshold = v;
    }
    if let Some(v) = fr.stage {
        reward.stage = v;
    }
    if let Some(v) = fr.normalize_endpoints {
        reward.normalize_endpoints = v;
    }
    if let Some(v) = fr.allow_empty_think {
        reward.allow_empty_think = v;
    }
    if let Some(v) = fr.level_weights {
        reward.level_weights = v;
    }
    if let Some(v) = ov.alpha {
        reward.alpha = v;
    }
    if let Some(v) = ov.beta {
        reward.beta = v;
    }
    if let Some(v) = ov.gamma {
        reward.gamma = v;
    }
    if let Some(v) = ov.delta {
        reward.delta = v;
    }
    if let Some(v) = f1_flag {
        reward.f1_threshold = v;
    }

    let mut grpo = GrpoConfig::default();
    let fg = &file.grpo;
    if let Some(v) = fg.group_size {
        grpo.group_size = v;
    }
    if let Some(v) = fg.clip_epsilon {
        grpo.clip_epsilon = v;
    }
    if let Some(v) = fg.kl_coef {
        grpo.kl_coef = v;
    }
    if let Some(v) = fg.learning_rate {
        grpo.learning_rate = v;
    }
    if let Some(v) = fg.epochs {
        grpo.epochs = v;
    }
    if let Some(v) = fg.iterations_per_epoch {
        grpo.iterations_per_epoch = v;
    }
    if let Some(v) = fg.max_tokens {
        grpo.max_tokens = v;
    }
    if let Some(v) = fg.later_stage_after_epoch {
        grpo.later_stage_after_epoch = v;
    }
    // Seed: flag, then the training section, then the file-wide seed.
    if let Some(v) = seed_flag.or(fg.seed).or(file.seed) {
        grpo.seed = v;
    }
    if let Some(v) = ov.group_size {
        grpo.group_size = v;
    }
    if let Some(v) = ov.clip_epsilon {
        grpo.clip_epsilon = v;
    }
    if let Some(v) = ov.kl_coef {
        grpo.kl_coef = v;
    }
    if let Some(v) = ov.learning_rate {
        grpo.learning_rate = v;
    }
    if let Some(v) = ov.epochs {
        grpo.epochs = v;
    }
    if let Some(v) = ov.iterations {
        grpo.iterations_per_epoch = v;
    }
    if let Some(v) = ov.max_tokens {
        grpo.max_tokens = v;
    }
    if let Some(v) = ov.later_after_epoch {
        grpo.later_stage_after_epoch = v;
    }
    match ov.stage.as_deref() {
        None | Some("schedule") => {}
        Some("binary-only") => {
            if ov.later_after_epoch.is_some() {
                return Err(Failure::Usage(
                    "--stage=binary-only already fixes the switch epoch; drop --later-after-epoch"
                        .to_string(),
                ));
            }
            grpo.later_stage_after_epoch = 0;
        }
        Some(other) => {
            return Err(Failure::Usage(format!(
                "unknown stage `{other}`; expected schedule or binary-only"
            )));
        }
    }
    grpo.reward = reward.clone();

    let had_section = file.pipeline.is_some() || ov.pipeline_config.is_some();
    let mut pipeline = file.pipeline.unwrap_or_default();
    if let Some(path) = &ov.pipeline_config {
        pipeline = read_json(path, "pipeline config")?;
    }
    if let Some(v) = seed_flag.or(if had_section { None } else { file.seed }) {
        pipeline.seed = v;
    }
    if let Some(v) = f1_flag {
        pipeline.f1_threshold = v;
    }
    match ov.grader.as_deref() {
        None => {}
        Some("rule") => pipeline.grader = GraderKind::Rule,
        Some("oracle") => pipeline.grader = GraderKind::Oracle,
        Some(other) => {
            return Err(Failure::Usage(format!(
                "unknown grader `{other}`; expected rule or oracle"
            )));
        }
    }
    if let Some(v) = ov.grade_k {
        pipeline.grade_k = v;
    }

    let seed = seed_flag.or(file.seed).unwrap_or(0);
    let max_steps = ov.max_steps.or(file.max_steps).unwrap_or(DEFAULT_ONLINE_MAX_STEPS);
    let workers = workers_flag.or(file.workers).unwrap_or(1);
    if workers == 0 {
        return Err(Failure::Usage("--workers must be at least 1".to_string()));
    }
    let format_name = ov.format.clone().or(file.format).unwrap_or_else(|| "json".to_string());
    let format: ReportFormat =
        format_name.parse().map_err(|e: riskforge_core::eval::EvalError| {
            Failure::Usage(e.to_string())
        })?;

    let hashed = HashedConfig { seed, max_steps, reward: &reward, grpo: &grpo, pipeline: &pipeline };
    let bytes = serde_json::to_vec(&hashed).expect("settings serialize");
    let hash = sha256_hex(&bytes);
    let echo = serde_json::to_value(&hashed).expect("settings serialize");

    Ok(Settings { seed, max_steps, workers, format, reward, grpo, pipeline, hash, echo })
}

/// Envelope for the JSON artifacts the command line itself owns: the hash
/// plus the full resolved configuration, so a report is traceable without
/// the original invocation.
#[derive(Serialize)]
pub struct Artifact<'a, T: Serialize> {
    pub schema_version: u32,
    pub config_hash: &'a str,
    pub config: &'a serde_json::Value,
    pub result: &'a T,
}

pub fn write_json_artifact<T: Serialize>(
    path: &Path,
    settings: &Settings,
    result: &T,
) -> Result<(), Failure> {
    let artifact = Artifact {
        schema_version: 1,
        config_hash: &settings.hash,
        config: &settings.echo,
        result,
    };
    let mut text = serde_json::to_string_pretty(&artifact).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::Schema(format!("cannot write `{}`: {e}", path.display())))
}
