//! End-to-end runs of the compiled binary against the shipped fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// A command with the inherited RISKFORGE_* environment scrubbed, so tests
/// stay hermetic no matter what shell they run from.
fn riskforge() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_riskforge"));
    for key in [
        "RISKFORGE_CONFIG",
        "RISKFORGE_SEED",
        "RISKFORGE_WORKERS",
        "RISKFORGE_F1_THRESHOLD",
        "RISKFORGE_FORMAT",
        "RISKFORGE_MAX_STEPS",
        "RISKFORGE_GROUP_SIZE",
        "RISKFORGE_CLIP_EPSILON",
        "RISKFORGE_KL_COEF",
        "RISKFORGE_LEARNING_RATE",
        "RISKFORGE_EPOCHS",
        "RISKFORGE_ITERATIONS",
        "RISKFORGE_ALPHA",
        "RISKFORGE_BETA",
        "RISKFORGE_GAMMA",
        "RISKFORGE_DELTA",
    ] {
        cmd.env_remove(key);
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn json_file(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).expect("artifact exists");
    serde_json::from_str(&text).expect("artifact is json")
}

#[test]
fn gold_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = run(riskforge()
        .arg("score-single")
        .arg("--gold")
        .arg(fixture("bench_single.jsonl"))
        .arg("--predictions")
        .arg(fixture("preds_single_gold.jsonl"))
        .arg("--out")
        .arg(&report));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("3 of 3 correct (100.0%)"));
    let report = json_file(&report);
    assert_eq!(report["result"]["overall_accuracy"], 1.0);
    let hash = report["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn mixed_predictions_report_and_breakdown_agree() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let out = run(riskforge()
        .arg("score-single")
        .arg("--gold")
        .arg(fixture("bench_single.jsonl"))
        .arg("--predictions")
        .arg(fixture("preds_single_mixed.jsonl"))
        .arg("--out")
        .arg(&report_path)
        .arg("--emit-breakdown"));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("2 of 3 correct (66.7%)"));

    let report = json_file(&report_path);
    let breakdown_path = dir.path().join("report.json.breakdown.jsonl");
    let breakdown = std::fs::read_to_string(&breakdown_path).unwrap();
    let lines: Vec<serde_json::Value> =
        breakdown.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4, "header plus one line per scored pair");
    assert_eq!(lines[0]["config_hash"], report["config_hash"]);
    let combined: Vec<f64> =
        lines[1..].iter().map(|l| l["breakdown"]["combined"].as_f64().unwrap()).collect();
    assert_eq!(combined.iter().filter(|&&c| c == 1.0).count(), 2);
    assert!(combined.iter().any(|&c| c < 1.0));
}

#[test]
fn multi_step_scoring_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.csv");
    let out = run(riskforge()
        .arg("score-multi")
        .arg("--gold")
        .arg(fixture("bench_multi.jsonl"))
        .arg("--predictions")
        .arg(fixture("preds_multi.jsonl"))
        .arg("--out")
        .arg(&report)
        .arg("--format")
        .arg("csv"));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("3 of 4 correct (75.0%)"));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("# config_hash="));
    assert!(text.contains("overall,4,3,75.0"));
}

#[test]
fn oracle_run_and_its_replay_produce_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("online.json");
    let out = run(riskforge()
        .arg("run-online")
        .arg("--site")
        .arg(fixture("site_small.json"))
        .arg("--tasks")
        .arg(fixture("tasks_small.jsonl"))
        .arg("--out")
        .arg(&first)
        .arg("--workers")
        .arg("3"));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("completion 100.0%, success 100.0%"));

    let episodes = dir.path().join("online.json.episodes.jsonl");
    let second = dir.path().join("replayed.json");
    let out = run(riskforge()
        .arg("run-online")
        .arg("--site")
        .arg(fixture("site_small.json"))
        .arg("--tasks")
        .arg(fixture("tasks_small.jsonl"))
        .arg("--agent")
        .arg(format!("replay:{}", episodes.display()))
        .arg("--out")
        .arg(&second));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    let replayed_episodes = dir.path().join("replayed.json.episodes.jsonl");
    assert_eq!(
        std::fs::read(&episodes).unwrap(),
        std::fs::read(&replayed_episodes).unwrap()
    );
}

#[test]
fn unknown_agent_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(riskforge()
        .arg("run-online")
        .arg("--site")
        .arg(fixture("site_small.json"))
        .arg("--tasks")
        .arg(fixture("tasks_small.jsonl"))
        .arg("--agent")
        .arg("teleport")
        .arg("--out")
        .arg(dir.path().join("out.json")));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unknown agent"));
}

#[test]
fn missing_gold_file_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(riskforge()
        .arg("score-single")
        .arg("--gold")
        .arg(dir.path().join("nope.jsonl"))
        .arg("--predictions")
        .arg(fixture("preds_single_gold.jsonl"))
        .arg("--out")
        .arg(dir.path().join("out.json")));
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_site_file_is_a_fixture_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(riskforge()
        .arg("run-online")
        .arg("--site")
        .arg(dir.path().join("nope.json"))
        .arg("--tasks")
        .arg(fixture("tasks_small.jsonl"))
        .arg("--out")
        .arg(dir.path().join("out.json")));
    assert_eq!(code(&out), 3);
}

#[test]
fn inconsistent_site_is_a_fixture_error() {
    let dir = tempfile::tempdir().unwrap();
    let site: serde_json::Value =
        json_file(&fixture("site_tiny.json"));
    let mut broken = site;
    broken["start_url"] = "https://registry.test/not-a-page".into();
    let path = dir.path().join("broken_site.json");
    std::fs::write(&path, serde_json::to_string(&broken).unwrap()).unwrap();
    let out = run(riskforge()
        .arg("run-online")
        .arg("--site")
        .arg(&path)
        .arg("--tasks")
        .arg(fixture("tasks_tiny.jsonl"))
        .arg("--out")
        .arg(dir.path().join("out.json")));
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}

fn train_once(dir: &Path, epochs: &str, resume: Option<&Path>, tag: &str) -> (PathBuf, PathBuf) {
    let ckpt = dir.join(format!("{tag}.ckpt.json"));
    let report = dir.join(format!("{tag}.report.json"));
    let mut cmd = riskforge();
    cmd.arg("train")
        .arg("--site")
        .arg(fixture("site_tiny.json"))
        .arg("--tasks")
        .arg(fixture("tasks_tiny.jsonl"))
        .arg("--epochs")
        .arg(epochs)
        .arg("--iterations")
        .arg("2")
        .arg("--learning-rate")
        .arg("60")
        .arg("--group-size")
        .arg("4")
        .arg("--out-checkpoint")
        .arg(&ckpt)
        .arg("--out-report")
        .arg(&report);
    if let Some(prev) = resume {
        cmd.arg("--resume").arg(prev);
    }
    let out = run(&mut cmd);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    (ckpt, report)
}

#[test]
fn training_writes_a_checkpoint_the_resumed_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let (first_ckpt, first_report) = train_once(dir.path(), "1", None, "first");

    let first = json_file(&first_ckpt);
    assert_eq!(first["epochs_completed"], 1);
    let report = json_file(&first_report);
    assert_eq!(report["config_hash"], first["config_hash"]);

    let (second_ckpt, _) = train_once(dir.path(), "1", Some(&first_ckpt), "second");
    let second = json_file(&second_ckpt);
    assert_eq!(second["epochs_completed"], 2);

    // One two-epoch run lands on the same weights as two chained one-epoch runs.
    let (full_ckpt, _) = train_once(dir.path(), "2", None, "full");
    let full = json_file(&full_ckpt);
    assert_eq!(full["weights"], second["weights"]);
    assert_eq!(full["vocabulary"], second["vocabulary"]);
}

#[test]
fn pipeline_sweep_curates_then_rule_grading_rebands() {
    let dir = tempfile::tempdir().unwrap();
    let curated = dir.path().join("curated.jsonl");
    let out = run(riskforge()
        .arg("pipeline")
        .arg("--in")
        .arg(fixture("raw_synthetic.jsonl"))
        .arg("--out")
        .arg(&curated)
        .arg("--probs")
        .arg(fixture("grading_probs.json")));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("filter:"), "every stage reports: {text}");
    assert!(text.contains("grade:"));

    let report = json_file(&dir.path().join("curated.jsonl.report.json"));
    assert_eq!(report["result"]["stages"].as_array().unwrap().len(), 6);
    let kept = std::fs::read_to_string(&curated).unwrap().lines().count();
    let distribution: u64 = report["result"]["level_distribution"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(distribution as usize, kept);

    let regraded = dir.path().join("regraded.jsonl");
    let out = run(riskforge()
        .arg("grade")
        .arg("--in")
        .arg(&curated)
        .arg("--out")
        .arg(&regraded)
        .arg("--grader")
        .arg("rule"));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let regraded_count = std::fs::read_to_string(&regraded).unwrap().lines().count();
    assert_eq!(regraded_count, kept, "grading rebalances levels, never drops");
}

#[test]
fn oracle_grading_without_a_responder_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(riskforge()
        .arg("grade")
        .arg("--in")
        .arg(fixture("raw_synthetic.jsonl"))
        .arg("--out")
        .arg(dir.path().join("out.jsonl"))
        .arg("--grader")
        .arg("oracle"));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--probs or --policy"));
}

#[test]
fn responder_flags_contradict_the_rule_grader() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(riskforge()
        .arg("grade")
        .arg("--in")
        .arg(fixture("raw_synthetic.jsonl"))
        .arg("--out")
        .arg(dir.path().join("out.jsonl"))
        .arg("--grader")
        .arg("rule")
        .arg("--probs")
        .arg(fixture("grading_probs.json")));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("oracle grader"));
}

#[test]
fn process_weight_curves_hit_published_values() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("curves.csv");
    let out = run(riskforge().arg("curves").arg("--n").arg("9").arg("--out").arg(&csv_path));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "position,frac,g1.0,g0.4_d4,g0.7_d4,g0.7_d1,g0.7_d7");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    assert_eq!(rows[0][3], "0.410792", "steep low-floor curve at the first step");
    let midpoint = &rows[4];
    assert_eq!(midpoint[1], "0.500000");
    assert_eq!(midpoint[4], "0.850000", "default curve midpoint");
    assert!(rows.iter().all(|r| r[2] == "1.000000"), "flat curve stays at one");
}

#[test]
fn training_report_tabulates_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = train_once(dir.path(), "1", None, "only");
    let csv_path = dir.path().join("train.csv");
    let out = run(riskforge()
        .arg("curves")
        .arg("--what")
        .arg("training-report")
        .arg("--report")
        .arg(&report)
        .arg("--out")
        .arg(&csv_path));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(
        lines.next().unwrap(),
        "epoch,iteration,stage,mean_reward,format_rate,mean_kl,objective"
    );
    assert_eq!(lines.count(), 2, "one row per training iteration");
}

#[test]
fn simulate_resumes_from_a_saved_state() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    let out = run(riskforge()
        .arg("simulate")
        .arg("--site")
        .arg(fixture("site_small.json"))
        .arg("--tasks")
        .arg(fixture("tasks_small.jsonl"))
        .arg("--task")
        .arg("reach-directory")
        .arg("--actions")
        .arg(r#"[{"click_element_by_index":{"index":0}}]"#)
        .arg("--out-state")
        .arg(&state));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("ok: navigated to https://registry.test/directory"));
    assert!(text.contains("completed: false"));

    let out = run(riskforge()
        .arg("simulate")
        .arg("--site")
        .arg(fixture("site_small.json"))
        .arg("--tasks")
        .arg(fixture("tasks_small.jsonl"))
        .arg("--task")
        .arg("reach-directory")
        .arg("--state")
        .arg(&state)
        .arg("--actions")
        .arg(r#"[{"done":{"text":"reached https://registry.test/directory","success":true,"files_to_display":[]}}]"#));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("completed: true, success: true"));
}

#[test]
fn malformed_action_list_is_a_schema_error() {
    let out = run(riskforge()
        .arg("simulate")
        .arg("--site")
        .arg(fixture("site_small.json"))
        .arg("--tasks")
        .arg(fixture("tasks_small.jsonl"))
        .arg("--actions")
        .arg(r#"[{"type":"click","target":"x"}]"#));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("action list"));
}

/// The config hash embedded in artifacts reflects precedence: a seed given
/// by flag beats one from the environment, which beats the file.
#[test]
fn seed_precedence_is_flag_env_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"seed": 11}"#).unwrap();

    let hash_of = |cmd: &mut Command| {
        let csv_path_holder = tempfile::tempdir().unwrap();
        let csv = csv_path_holder.path().join("c.csv");
        let out = run(cmd.arg("curves").arg("--n").arg("2").arg("--out").arg(&csv));
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        let text = std::fs::read_to_string(&csv).unwrap();
        text.lines().next().unwrap().to_string()
    };

    let flag_only = hash_of(riskforge().arg("--seed").arg("7"));
    let env_only = hash_of(riskforge().env("RISKFORGE_SEED", "123"));
    let env_and_flag =
        hash_of(riskforge().env("RISKFORGE_SEED", "123").arg("--seed").arg("7"));
    let file_only = hash_of(riskforge().arg("--config").arg(&config));
    let file_and_env = hash_of(
        riskforge().env("RISKFORGE_SEED", "123").arg("--config").arg(&config),
    );

    assert_eq!(env_and_flag, flag_only, "flag wins over environment");
    assert_ne!(env_only, flag_only);
    assert_eq!(file_and_env, env_only, "environment wins over file");
    assert_ne!(file_only, env_only);
}

#[test]
fn unknown_config_file_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"bogus": 1}"#).unwrap();
    let out = run(riskforge()
        .arg("--config")
        .arg(&config)
        .arg("curves")
        .arg("--out")
        .arg(dir.path().join("c.csv")));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn unknown_report_format_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(riskforge()
        .arg("score-single")
        .arg("--gold")
        .arg(fixture("bench_single.jsonl"))
        .arg("--predictions")
        .arg(fixture("preds_single_gold.jsonl"))
        .arg("--out")
        .arg(dir.path().join("out.yaml"))
        .arg("--format")
        .arg("yaml"));
    assert_eq!(code(&out), 1);
}

#[test]
fn help_text_states_defaults() {
    let out = run(riskforge().arg("--help"));
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("(default: 1)"), "workers default");

    let out = run(riskforge().arg("train").arg("--help"));
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for needle in ["(default: 8)", "(default: 0.2)", "(default: 0.04)", "(default: 1e-6"] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }
}
