//! Reward shaping for sampled rollouts.
//!
//! A rollout is scored in three parts. The format part is the binary parse
//! check from [`crate::parser`]. The accuracy part compares the predicted
//! tool list position by position against the gold list: one tool call
//! matches when the F1 over its argument item multiset strictly exceeds the
//! configured threshold. Early in training the per-step accuracy is the mean
//! of the positional matches (dense signal); later it collapses to the binary
//! whole-list match. A position-dependent process weight
//! `θ(i) = γ + (1-γ)·sigmoid(2δ(i-1)/(n-1) - δ)` discounts early steps of a
//! trajectory relative to late ones, and the pieces combine linearly:
//! `R = α·R_format + β·θ·R_acc`.

use serde::{Deserialize, Serialize};

use crate::model::{action_items, Action, Difficulty, ItemValue, StepRecord};
use crate::parser::{format_reward, parse_response, ParseOptions};
use crate::util::token_f1;

/// Which per-step accuracy rule is in force.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Mean of positional tool matches.
    #[default]
    Early,
    /// Binary: 1 only when every position matches and lengths agree.
    Later,
}

/// Difficulty multipliers applied per prompt during optimization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelWeights {
    pub easy: f64,
    pub moderate: f64,
    pub difficult: f64,
}

impl Default for LevelWeights {
    fn default() -> Self {
        LevelWeights { easy: 1.0, moderate: 1.1, difficult: 1.2 }
    }
}

impl LevelWeights {
    /// Ungraded samples carry unit weight.
    pub fn weight(&self, difficulty: Difficulty) -> f64 {
        match difficulty {
            Difficulty::Easy => self.easy,
            Difficulty::Moderate => self.moderate,
            Difficulty::Difficult => self.difficult,
            Difficulty::Ungraded => 1.0,
        }
    }

    pub fn uniform() -> Self {
        LevelWeights { easy: 1.0, moderate: 1.0, difficult: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Weight of the format part.
    pub alpha: f64,
    /// Weight of the accuracy part.
    pub beta: f64,
    /// Floor of the process weight curve.
    pub gamma: f64,
    /// Steepness of the process weight curve.
    pub delta: f64,
    /// Strict lower bound a tool-call F1 must exceed to count as a match.
    pub f1_threshold: f64,
    pub stage: Stage,
    /// Rescale the process weight so θ(1) = γ and θ(n) = 1 exactly.
    pub normalize_endpoints: bool,
    /// Accept an empty `think` field when parsing candidates.
    pub allow_empty_think: bool,
    pub level_weights: LevelWeights,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 0.1,
            beta: 0.9,
            gamma: 0.7,
            delta: 4.0,
            f1_threshold: 0.5,
            stage: Stage::Early,
            normalize_endpoints: false,
            allow_empty_think: false,
            level_weights: LevelWeights::default(),
        }
    }
}

impl RewardConfig {
    #[must_use]
    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    #[must_use]
    pub fn with_level_weights(mut self, level_weights: LevelWeights) -> Self {
        self.level_weights = level_weights;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err("alpha and beta must be non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.delta > 0.0) {
            return Err(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.f1_threshold > 0.0 && self.f1_threshold < 1.0) {
            return Err(format!("f1_threshold must lie in (0, 1), got {}", self.f1_threshold));
        }
        Ok(())
    }

    fn parse_options(&self) -> ParseOptions {
        ParseOptions { allow_empty_think: self.allow_empty_think }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Process weight of step `i` of `n` (both 1-based, `i ≤ n`).
///
/// Single-step trajectories weigh 1. With `normalize_endpoints` the sigmoid
/// is affinely rescaled so the first step sits exactly at γ and the last at 1;
/// otherwise the raw curve runs from γ + (1-γ)·sigmoid(-δ) up to
/// γ + (1-γ)·sigmoid(δ).
pub fn process_weight(i: u32, n: u32, cfg: &RewardConfig) -> f64 {
    debug_assert!(i >= 1 && i <= n.max(1), "step position {i} of {n} out of range");
    if n <= 1 {
        return 1.0;
    }
    let frac = (i - 1) as f64 / (n - 1) as f64;
    let x = 2.0 * cfg.delta * frac - cfg.delta;
    let s = if cfg.normalize_endpoints {
        let lo = sigmoid(-cfg.delta);
        let hi = sigmoid(cfg.delta);
        (sigmoid(x) - lo) / (hi - lo)
    } else {
        sigmoid(x)
    };
    cfg.gamma + (1.0 - cfg.gamma) * s
}

fn value_matches(pred: &ItemValue, gold: &ItemValue, f1_threshold: f64) -> bool {
    match (pred, gold) {
        (ItemValue::Str(a), ItemValue::Str(b)) => token_f1(a, b) > f1_threshold,
        _ => pred == gold,
    }
}

/// Maximum bipartite matching (Kuhn's augmenting paths) between predicted and
/// gold items; an edge requires equal keys and matching values. Sizes here
/// are tiny, so the O(V·E) bound is irrelevant.
fn max_item_matching(
    pred: &[(String, ItemValue)],
    gold: &[(String, ItemValue)],
    f1_threshold: f64,
) -> usize {
    let adj: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| {
            gold.iter()
                .enumerate()
                .filter(|(_, g)| p.0 == g.0 && value_matches(&p.1, &g.1, f1_threshold))
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    fn augment(i: usize, adj: &[Vec<usize>], used: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if !used[j] {
                used[j] = true;
                if owner[j].is_none() || augment(owner[j].unwrap(), adj, used, owner) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }

    let mut owner: Vec<Option<usize>> = vec![None; gold.len()];
    let mut matched = 0;
    for i in 0..pred.len() {
        let mut used = vec![false; gold.len()];
        if augment(i, &adj, &mut used, &mut owner) {
            matched += 1;
        }
    }
    matched
}

/// F1 between two tool calls over their argument item multisets, with each
/// gold item consumed at most once. 1.0 means identical under the fuzzy
/// string rule; the tool name itself is one of the items, so calls to
/// different tools can still share argument credit.
pub fn tool_f1(pred: &Action, gold: &Action, f1_threshold: f64) -> f64 {
    let p = action_items(pred);
    let g = action_items(gold);
    let matched = max_item_matching(&p, &g, f1_threshold);
    2.0 * matched as f64 / (p.len() + g.len()) as f64
}

/// Binary match: F1 strictly above the threshold. Sharing only the tool name
/// on a two-item call gives F1 = 0.5, which a 0.5 threshold rejects.
pub fn tool_match(pred: &Action, gold: &Action, cfg: &RewardConfig) -> u8 {
    (tool_f1(pred, gold, cfg.f1_threshold) > cfg.f1_threshold) as u8
}

/// Positional per-step accuracy over two tool lists.
///
/// Positions beyond the shorter list count as mismatches. `Early` averages
/// the positional matches over `max(|pred|, |gold|)`; `Later` is 1 only for a
/// complete, equal-length match. Two empty lists score 1 under both rules.
pub fn stepwise_accuracy(pred: &[Action], gold: &[Action], stage: Stage, f1_threshold: f64) -> f64 {
    let n = pred.len().max(gold.len());
    if n == 0 {
        return 1.0;
    }
    let cfg = RewardConfig { f1_threshold, ..RewardConfig::default() };
    let matches: Vec<u8> = (0..n)
        .map(|i| match (pred.get(i), gold.get(i)) {
            (Some(p), Some(g)) => tool_match(p, g, &cfg),
            _ => 0,
        })
        .collect();
    match stage {
        Stage::Early => matches.iter().map(|&m| m as f64).sum::<f64>() / n as f64,
        Stage::Later => {
            (pred.len() == gold.len() && matches.iter().all(|&m| m == 1)) as u8 as f64
        }
    }
}

/// Linear combination `α·format + β·θ·accuracy`.
pub fn combined_reward(format_r: f64, step_acc: f64, theta: f64, cfg: &RewardConfig) -> f64 {
    cfg.alpha * format_r + cfg.beta * theta * step_acc
}

/// Full scoring record for one candidate against one gold step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_r: u8,
    /// Positional tool-call F1 values, zero where one side has no call.
    pub tool_f1s: Vec<f64>,
    /// Positional binary matches under the strict threshold.
    pub tool_matches: Vec<u8>,
    pub step_acc: f64,
    pub process_weight: f64,
    pub combined: f64,
    pub level_weight: f64,
}

/// Scores one raw candidate against a gold step. The step must carry a gold
/// response. An unparseable candidate keeps its process weight in the record
/// but earns nothing.
pub fn score_rollout(
    gold_step: &StepRecord,
    difficulty: Difficulty,
    candidate: &str,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let gold = gold_step
        .gold
        .as_ref()
        .expect("score_rollout requires a step with a gold response");
    let n = gold_step.step_count.max(gold_step.step_index).max(1);
    let theta = process_weight(gold_step.step_index.max(1), n, cfg);
    let level_weight = cfg.level_weights.weight(difficulty);

    match parse_response(candidate, &cfg.parse_options()) {
        Err(_) => RewardBreakdown {
            format_r: 0,
            tool_f1s: Vec::new(),
            tool_matches: Vec::new(),
            step_acc: 0.0,
            process_weight: theta,
            combined: combined_reward(0.0, 0.0, theta, cfg),
            level_weight,
        },
        Ok(resp) => {
            let pred = &resp.action;
            let gold_actions = &gold.action;
            let len = pred.len().max(gold_actions.len());
            let tool_f1s: Vec<f64> = (0..len)
                .map(|i| match (pred.get(i), gold_actions.get(i)) {
                    (Some(p), Some(g)) => tool_f1(p, g, cfg.f1_threshold),
                    _ => 0.0,
                })
                .collect();
            let tool_matches: Vec<u8> =
                tool_f1s.iter().map(|&f| (f > cfg.f1_threshold) as u8).collect();
            let step_acc = stepwise_accuracy(pred, gold_actions, cfg.stage, cfg.f1_threshold);
            RewardBreakdown {
                format_r: 1,
                tool_f1s,
                tool_matches,
                step_acc,
                process_weight: theta,
                combined: combined_reward(1.0, step_acc, theta, cfg),
                level_weight,
            }
        }
    }
}

/// `format_reward` with this config's parse options. Convenience for callers
/// that only need the binary format part.
pub fn format_reward_with(cfg: &RewardConfig, raw: &str) -> u8 {
    format_reward(raw, &cfg.parse_options())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentResponse, DomSnapshot};
    use proptest::prelude::*;

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    fn click(index: i64) -> Action {
        Action::ClickElementByIndex { index, delay: None }
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = cfg();
        assert_eq!(
            (c.alpha, c.beta, c.gamma, c.delta, c.f1_threshold),
            (0.1, 0.9, 0.7, 4.0, 0.5)
        );
        assert_eq!(c.level_weights, LevelWeights { easy: 1.0, moderate: 1.1, difficult: 1.2 });
        c.validate().unwrap();
    }

    #[test]
    fn process_weight_endpoints_and_midpoint() {
        let c = cfg();
        let lo = process_weight(1, 7, &c);
        let mid = process_weight(4, 7, &c);
        let hi = process_weight(7, 7, &c);
        // Independent evaluation of the same curve at its extremes.
        let ind_lo = 0.7 + 0.3 / (1.0 + 4.0f64.exp());
        let ind_hi = 0.7 + 0.3 / (1.0 + (-4.0f64).exp());
        assert!((lo - ind_lo).abs() < 1e-15);
        assert!((hi - ind_hi).abs() < 1e-15);
        assert!((lo - 0.70540).abs() < 1e-5);
        assert!((hi - 0.99460).abs() < 1e-5);
        assert_eq!(mid, 0.7 + (1.0 - 0.7) / 2.0);
    }

    #[test]
    fn gamma_one_flattens_the_curve() {
        let c = RewardConfig { gamma: 1.0, ..cfg() };
        for i in 1..=9 {
            assert_eq!(process_weight(i, 9, &c), 1.0);
        }
    }

    #[test]
    fn single_step_weight_is_one() {
        assert_eq!(process_weight(1, 1, &cfg()), 1.0);
    }

    #[test]
    fn normalized_curve_pins_both_endpoints() {
        let c = RewardConfig { normalize_endpoints: true, ..cfg() };
        let lo = process_weight(1, 11, &c);
        let hi = process_weight(11, 11, &c);
        assert!((lo - c.gamma).abs() < 1e-15);
        assert!((hi - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flat_start_of_shallow_curve() {
        let c = RewardConfig { gamma: 0.4, delta: 4.0, ..cfg() };
        let first = process_weight(1, 100, &c);
        assert!((first - 0.4108).abs() < 1e-4, "{first}");
    }

    #[test]
    fn index_mismatch_sits_exactly_on_the_rejection_boundary() {
        let f = tool_f1(&click(3), &click(5), 0.5);
        assert_eq!(f, 0.5);
        assert_eq!(tool_match(&click(3), &click(5), &cfg()), 0);
        assert_eq!(tool_match(&click(3), &click(3), &cfg()), 1);
    }

    #[test]
    fn fuzzy_string_items_match_by_token_f1() {
        let pred = Action::ExtractStructuredData {
            query: "registration number of acme ltd".into(),
            extract_links: false,
        };
        let gold = Action::ExtractStructuredData {
            query: "acme ltd registration number".into(),
            extract_links: false,
        };
        assert_eq!(tool_f1(&pred, &gold, 0.5), 1.0);

        let unrelated = Action::ExtractStructuredData {
            query: "shipping policy".into(),
            extract_links: false,
        };
        // Name and bool match, query does not: 2 of 3 items.
        let f = tool_f1(&unrelated, &gold, 0.5);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(tool_match(&unrelated, &gold, &cfg()), 1);
    }

    #[test]
    fn accuracy_rules_diverge_on_partial_lists() {
        let gold = vec![click(1), Action::Done { text: "ok".into(), success: true, files_to_display: vec![] }];
        let pred = vec![click(1)];
        assert_eq!(stepwise_accuracy(&pred, &gold, Stage::Early, 0.5), 0.5);
        assert_eq!(stepwise_accuracy(&pred, &gold, Stage::Later, 0.5), 0.0);
        assert_eq!(stepwise_accuracy(&gold, &gold, Stage::Later, 0.5), 1.0);
    }

    #[test]
    fn combined_reward_frozen_points() {
        let c = cfg();
        let theta = process_weight(1, 7, &c);
        assert!((combined_reward(1.0, 0.5, theta, &c) - 0.41743).abs() < 1e-5);
        assert_eq!(combined_reward(1.0, 0.0, theta, &c), 0.1);
        assert_eq!(combined_reward(1.0, 1.0, 1.0, &c), 1.0);
        assert_eq!(combined_reward(0.0, 0.0, theta, &c), 0.0);
    }

    fn gold_step(actions: Vec<Action>, step_index: u32, step_count: u32) -> StepRecord {
        StepRecord {
            step_index,
            question: "q".into(),
            screenshot_ref: None,
            dom: DomSnapshot {
                url: "https://a.example/".into(),
                elements: vec![],
                viewport_start: 0,
                tab_ids: vec![0],
                history_depth: 0,
            },
            gold: Some(AgentResponse {
                think: "t".into(),
                evaluation_previous_goal: "e".into(),
                memory: "m".into(),
                next_goal: "n".into(),
                action: actions,
            }),
            predicted: None,
            step_count,
        }
    }

    #[test]
    fn unparseable_candidate_scores_zero_but_keeps_theta() {
        let step = gold_step(vec![click(1)], 2, 7);
        let b = score_rollout(&step, Difficulty::Moderate, "not json", &cfg());
        assert_eq!(b.format_r, 0);
        assert!(b.tool_f1s.is_empty() && b.tool_matches.is_empty());
        assert_eq!(b.step_acc, 0.0);
        assert_eq!(b.combined, 0.0);
        assert!((b.process_weight - process_weight(2, 7, &cfg())).abs() < 1e-15);
        assert_eq!(b.level_weight, 1.1);
    }

    #[test]
    fn perfect_single_step_candidate_scores_one() {
        let step = gold_step(vec![click(1)], 1, 1);
        let raw = r#"{"think":"t","evaluation_previous_goal":"e","memory":"m","next_goal":"n","action":[{"click_element_by_index":{"index":1}}]}"#;
        let b = score_rollout(&step, Difficulty::Easy, raw, &cfg());
        assert_eq!(b.format_r, 1);
        assert_eq!(b.tool_matches, vec![1]);
        assert_eq!(b.process_weight, 1.0);
        assert_eq!(b.combined, 1.0);
    }

    proptest! {
        #[test]
        fn theta_is_monotone_in_position(
            gamma in 0.0f64..1.0,
            delta in 0.1f64..9.0,
            n in 2u32..40,
            normalize in proptest::bool::ANY,
        ) {
            let c = RewardConfig { gamma, delta, normalize_endpoints: normalize, ..cfg() };
            let mut prev = f64::NEG_INFINITY;
            for i in 1..=n {
                let t = process_weight(i, n, &c);
                prop_assert!(t >= prev - 1e-12);
                prop_assert!(t >= gamma - 1e-12 && t <= 1.0 + 1e-12);
                prev = t;
            }
            let edge = (1.0 - gamma) * (1.0 / (1.0 + delta.exp()));
            if !normalize {
                prop_assert!((process_weight(1, n, &c) - gamma - edge).abs() < 1e-12);
                prop_assert!(((1.0 - process_weight(n, n, &c)) - edge).abs() < 1e-12);
            }
        }

        #[test]
        fn early_accuracy_dominates_later(
            pred_len in 0usize..4,
            gold_len in 1usize..4,
            seedx in 0i64..8,
        ) {
            let pred: Vec<Action> = (0..pred_len).map(|i| click(i as i64 + seedx)).collect();
            let gold: Vec<Action> = (0..gold_len).map(|i| click(i as i64)).collect();
            let early = stepwise_accuracy(&pred, &gold, Stage::Early, 0.5);
            let later = stepwise_accuracy(&pred, &gold, Stage::Later, 0.5);
            prop_assert!(early >= later);
            prop_assert!((0.0..=1.0).contains(&early));
        }

        #[test]
        fn tool_f1_is_a_symmetric_unit_score(a in 0i64..5, b in 0i64..5, d in proptest::option::of(0i64..3)) {
            let x = Action::ClickElementByIndex { index: a, delay: d };
            let y = click(b);
            let f = tool_f1(&x, &y, 0.5);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(tool_f1(&y, &x, 0.5), f);
            prop_assert_eq!(tool_f1(&x, &x, 0.5), 1.0);
        }

        #[test]
        fn combined_is_monotone_in_every_argument(
            f1 in 0.0f64..1.0, f2 in 0.0f64..1.0,
            a1 in 0.0f64..1.0, a2 in 0.0f64..1.0,
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0,
        ) {
            let c = cfg();
            let lo = combined_reward(f1.min(f2), a1.min(a2), t1.min(t2), &c);
            let hi = combined_reward(f1.max(f2), a1.max(a2), t1.max(t2), &c);
            prop_assert!(lo <= hi + 1e-12);
        }
    }
}
