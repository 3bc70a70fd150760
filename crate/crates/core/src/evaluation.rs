//! Scoring predicted failure-relevant steps against gold labels, plus the
//! budget analytics derived from labeled runs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{DiagnosisResult, GoldAnnotation, Outcome, StageLabel, StepKind, Trajectory};

/// Set-overlap precision/recall/F1 for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Score a predicted step set against a gold step set. Empty predictions
/// score zero precision; a zero denominator anywhere scores zero.
pub fn step_prf(predicted: &BTreeSet<u32>, gold: &BTreeSet<u32>) -> PrfScores {
    let hits = predicted.intersection(gold).count() as f64;
    let precision = if predicted.is_empty() { 0.0 } else { hits / predicted.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { hits / gold.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfScores { precision, recall, f1 }
}

/// The three scoring views of one prediction: the union of labeled steps,
/// incorrect-only, and unuseful-only.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelViews {
    pub union: PrfScores,
    pub incorrect: PrfScores,
    pub unuseful: PrfScores,
}

/// Score a diagnosis against a gold annotation in all three views.
pub fn score_against_gold(pred: &DiagnosisResult, gold: &GoldAnnotation) -> LabelViews {
    LabelViews {
        union: step_prf(&pred.labeled_steps(), &gold.labeled_steps()),
        incorrect: step_prf(&pred.incorrect_steps(), &gold.incorrect_step_ids()),
        unuseful: step_prf(&pred.unuseful_steps(), &gold.unuseful_step_ids()),
    }
}

/// One run's scores, ready for aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEvaluation {
    pub task_id: String,
    pub views: LabelViews,
    pub predicted_size: usize,
    pub gold_size: usize,
    /// True when the gold union is empty (clean run); such instances are
    /// excluded from macro averages.
    pub empty_gold: bool,
}

/// Evaluate one run end to end.
pub fn evaluate_instance(
    task_id: &str,
    pred: &DiagnosisResult,
    gold: &GoldAnnotation,
) -> InstanceEvaluation {
    let gold_union = gold.labeled_steps();
    InstanceEvaluation {
        task_id: task_id.to_string(),
        views: score_against_gold(pred, gold),
        predicted_size: pred.labeled_steps().len(),
        gold_size: gold_union.len(),
        empty_gold: gold_union.is_empty(),
    }
}

/// Macro (per-instance arithmetic mean) aggregate across a corpus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MacroReport {
    /// Instances included in the averages.
    pub scored: usize,
    /// Instances skipped because their gold union was empty.
    pub excluded_empty_gold: usize,
    pub union: PrfScores,
    pub incorrect: PrfScores,
    pub unuseful: PrfScores,
    pub notices: Vec<String>,
}

/// Mean the per-instance scores, excluding empty-gold instances with an
/// explicit notice rather than letting them silently drag averages down.
pub fn macro_aggregate(evals: &[InstanceEvaluation]) -> MacroReport {
    let scored: Vec<&InstanceEvaluation> = evals.iter().filter(|e| !e.empty_gold).collect();
    let excluded = evals.len() - scored.len();
    let mut notices = Vec::new();
    if excluded > 0 {
        notices.push(format!(
            "{excluded} instance(s) with empty gold labels excluded from macro averaging"
        ));
    }
    let n = scored.len() as f64;
    let mean = |pick: fn(&LabelViews) -> PrfScores| -> PrfScores {
        if scored.is_empty() {
            return PrfScores::default();
        }
        PrfScores {
            precision: scored.iter().map(|e| pick(&e.views).precision).sum::<f64>() / n,
            recall: scored.iter().map(|e| pick(&e.views).recall).sum::<f64>() / n,
            f1: scored.iter().map(|e| pick(&e.views).f1).sum::<f64>() / n,
        }
    };
    MacroReport {
        scored: scored.len(),
        excluded_empty_gold: excluded,
        union: mean(|v| v.union),
        incorrect: mean(|v| v.incorrect),
        unuseful: mean(|v| v.unuseful),
        notices,
    }
}

/// Token spend of one run, with provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAccount {
    pub total_tokens: u64,
    /// True when the total is a character-count estimate, not a report.
    pub estimated: bool,
}

/// Account for a run's token spend: the dump's reported total when present,
/// else the sum of per-step usage, else ceil(chars / 4) flagged estimated.
pub fn token_account(t: &Trajectory) -> TokenAccount {
    if let Some(total) = t.total_tokens {
        return TokenAccount { total_tokens: total, estimated: false };
    }
    let per_step: Vec<u64> = t.steps.iter().filter_map(|s| s.token_usage).collect();
    if !per_step.is_empty() {
        return TokenAccount { total_tokens: per_step.iter().sum(), estimated: false };
    }
    let chars: u64 = t
        .steps
        .iter()
        .map(|s| {
            s.action.content.chars().count() as u64
                + s.action.thought.as_deref().map_or(0, |th| th.chars().count() as u64)
                + s.observation.as_ref().map_or(0, |o| o.content.chars().count() as u64)
        })
        .sum();
    TokenAccount { total_tokens: chars.div_ceil(4), estimated: true }
}

/// Fraction of steps not labeled failure-relevant: (N - |labeled|) / N.
pub fn effective_action_ratio(t: &Trajectory, labeled: &BTreeSet<u32>) -> f64 {
    if t.steps.is_empty() {
        return 0.0;
    }
    let n = t.steps.len() as f64;
    let labeled_in_run =
        labeled.iter().filter(|id| t.step(**id).is_some()).count() as f64;
    (n - labeled_in_run) / n
}

/// Where a run's step budget went, as fractions that sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetDecomposition {
    /// Unlabeled steps that changed state.
    pub correct_change: f64,
    /// Unlabeled steps that only gathered information.
    pub useful_explore: f64,
    /// Steps labeled incorrect or unuseful.
    pub ineffective: f64,
}

impl BudgetDecomposition {
    pub fn sum(&self) -> f64 {
        self.correct_change + self.useful_explore + self.ineffective
    }
}

/// Split the step budget by label status and step kind.
pub fn budget_decomposition(
    t: &Trajectory,
    kinds: &[StepKind],
    labeled: &BTreeSet<u32>,
) -> BudgetDecomposition {
    if t.steps.is_empty() {
        return BudgetDecomposition { correct_change: 0.0, useful_explore: 0.0, ineffective: 0.0 };
    }
    let n = t.steps.len() as f64;
    let mut ineffective = 0u64;
    let mut correct_change = 0u64;
    let mut useful_explore = 0u64;
    for (step, kind) in t.steps.iter().zip(kinds) {
        if labeled.contains(&step.step_id) {
            ineffective += 1;
        } else if *kind == StepKind::Change {
            correct_change += 1;
        } else {
            useful_explore += 1;
        }
    }
    BudgetDecomposition {
        correct_change: correct_change as f64 / n,
        useful_explore: useful_explore as f64 / n,
        ineffective: ineffective as f64 / n,
    }
}

/// One cell of the stage-by-outcome error histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageOutcomeCount {
    pub stage: StageLabel,
    pub outcome: Outcome,
    pub count: u64,
    pub fraction: f64,
}

/// Histogram of where critical errors land, by stage and run outcome.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStageDistribution {
    /// Annotations that carried a critical step inside a known stage.
    pub total: u64,
    pub cells: Vec<StageOutcomeCount>,
}

/// Count each annotation's critical step into its enclosing stage, split by
/// run outcome, with fractions normalized over counted annotations.
pub fn error_stage_distribution<'a>(
    annotations: impl IntoIterator<Item = &'a GoldAnnotation>,
) -> ErrorStageDistribution {
    let mut raw: Vec<(StageLabel, Outcome)> = Vec::new();
    for gold in annotations {
        let Some(critical) = gold.error_critical_step else { continue };
        let Some(stage) = gold.enclosing_stage(critical) else { continue };
        raw.push((stage.stage, gold.outcome.unwrap_or(Outcome::Unknown)));
    }
    let total = raw.len() as u64;
    let mut cells: Vec<StageOutcomeCount> = Vec::new();
    for (stage, outcome) in raw {
        match cells.iter_mut().find(|c| c.stage == stage && c.outcome == outcome) {
            Some(cell) => cell.count += 1,
            None => cells.push(StageOutcomeCount { stage, outcome, count: 1, fraction: 0.0 }),
        }
    }
    cells.sort_by_key(|c| (c.stage.as_str(), c.outcome.as_str()));
    for cell in &mut cells {
        cell.fraction = if total == 0 { 0.0 } else { cell.count as f64 / total as f64 };
    }
    ErrorStageDistribution { total, cells }
}
