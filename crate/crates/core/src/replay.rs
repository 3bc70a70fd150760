//! Reflective replay hints: compact briefings distilled from a diagnosed
//! failed run, sized so a retry can consume them alongside the task text.
//!
//! A hint names the stages that went wrong, the step ids to avoid repeating,
//! and a few evidence excerpts from the failed attempt. The replay budget
//! caps the retry at the failed run's own consumption. Hints degrade
//! gracefully under the size cap: evidence excerpts are dropped first, then
//! the task recap, then stage reasoning is shortened, and only as a last
//! resort is the assembled text cut mid-sentence.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evaluation::token_account;
use crate::model::{DiagnosisResult, EvidenceItem, Trajectory};

/// Hard ceiling on rendered hint length, in characters.
pub const MAX_HINT_CHARS: usize = 4_000;

/// Evidence excerpts included in a hint, at most.
pub const MAX_HINT_EVIDENCE: usize = 5;

/// Length ceiling for a single evidence excerpt, in characters.
pub const MAX_HINT_EXCERPT_CHARS: usize = 200;

/// Reasoning length used once everything else has been trimmed away.
const SHORT_REASONING_CHARS: usize = 160;

/// Task recap length included in the hint, in characters.
const TASK_RECAP_CHARS: usize = 600;

/// Filename for the rendered hint.
pub const HINT_FILENAME: &str = "replay_hint.txt";

/// Filename for the replay budget.
pub const BUDGET_FILENAME: &str = "replay_budget.json";

/// Resource cap for a replay attempt, taken from the failed run itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayBudget {
    /// Step allowance: the failed run's executed step count.
    pub max_steps: usize,
    /// Token allowance: the failed run's accounted token spend.
    pub max_tokens: u64,
}

/// Budget a replay at exactly what the failed attempt consumed.
pub fn replay_budget(t: &Trajectory) -> ReplayBudget {
    ReplayBudget { max_steps: t.steps.len(), max_tokens: token_account(t).total_tokens }
}

fn take_chars(text: &str, limit: usize) -> String {
    text.chars().take(limit).collect()
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn id_list(ids: &std::collections::BTreeSet<u32>) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
}

fn assemble(
    t: &Trajectory,
    task_recap: Option<&str>,
    result: &DiagnosisResult,
    diagnosis_cost: Option<u64>,
    evidence: &[EvidenceItem],
    reasoning_limit: Option<usize>,
) -> String {
    let budget = replay_budget(t);
    let mut out = String::new();
    out.push_str(&format!("# Replay hint for {}\n\n", t.task_id));
    out.push_str(&format!(
        "The previous attempt ended {} after {} steps.\n",
        t.outcome,
        t.steps.len()
    ));
    out.push_str(&format!(
        "Stay within the replay budget: {} steps, {} tokens.\n",
        budget.max_steps, budget.max_tokens
    ));
    if let Some(cost) = diagnosis_cost {
        out.push_str(&format!("Diagnosing the failure cost {cost} tokens.\n"));
    }

    if let Some(task) = task_recap {
        out.push_str("\n## Task recap\n");
        out.push_str(&take_chars(&single_line(task), TASK_RECAP_CHARS));
        out.push('\n');
    }

    if result.is_empty() {
        out.push_str(
            "\n## Guidance\nNo failure-relevant steps were identified in the previous \
             attempt. Retry the task from the start and verify every change against \
             the test suite before moving on.\n",
        );
        return out;
    }

    out.push_str("\n## Where the run went wrong\n");
    for stage in &result.stages {
        let (a, b) = stage.stage_id;
        let reasoning = match reasoning_limit {
            Some(limit) => take_chars(&single_line(&stage.reasoning), limit),
            None => single_line(&stage.reasoning),
        };
        out.push_str(&format!("- steps [{a}, {b}]: {reasoning}\n"));
        if !stage.incorrect_step_ids.is_empty() {
            out.push_str(&format!(
                "  Do not repeat step(s) {}: they introduced or compounded the failure.\n",
                id_list(&stage.incorrect_step_ids)
            ));
        }
        if !stage.unuseful_step_ids.is_empty() {
            out.push_str(&format!(
                "  Skip step(s) {}: they re-explored what was already known.\n",
                id_list(&stage.unuseful_step_ids)
            ));
        }
    }

    if !evidence.is_empty() {
        out.push_str("\n## Evidence from the failed attempt\n");
        for item in evidence {
            let excerpt = take_chars(&single_line(&item.excerpt), MAX_HINT_EXCERPT_CHARS);
            out.push_str(&format!("- step {}: {excerpt}\n", item.step_id));
        }
    }

    let restart_before = result
        .incorrect_steps()
        .into_iter()
        .next()
        .or_else(|| result.stages.first().map(|s| s.stage_id.0));
    if let Some(step) = restart_before {
        out.push_str(&format!(
            "\n## Guidance\nRe-plan before reaching what was step {step} in the failed \
             attempt, and run the test suite after every change instead of batching \
             edits.\n"
        ));
    }
    out
}

/// Render a replay hint of at most [`MAX_HINT_CHARS`] characters.
///
/// `diagnosis_cost` is the token spend of the diagnosis pass itself, when
/// known; it is surfaced so a replay scheduler can account for overhead.
pub fn render_hint(
    t: &Trajectory,
    task_text: Option<&str>,
    result: &DiagnosisResult,
    diagnosis_cost: Option<u64>,
) -> String {
    let mut evidence: Vec<EvidenceItem> =
        result.evidence.iter().take(MAX_HINT_EVIDENCE).cloned().collect();
    let mut task_recap = task_text;
    let mut reasoning_limit = None;
    loop {
        let text = assemble(t, task_recap, result, diagnosis_cost, &evidence, reasoning_limit);
        if text.chars().count() <= MAX_HINT_CHARS {
            return text;
        }
        if !evidence.is_empty() {
            evidence.pop();
        } else if task_recap.is_some() {
            task_recap = None;
        } else if reasoning_limit.is_none() {
            reasoning_limit = Some(SHORT_REASONING_CHARS);
        } else {
            return take_chars(&text, MAX_HINT_CHARS);
        }
    }
}

/// Write the hint and budget files into `dir`.
pub fn write_package(dir: &Path, hint: &str, budget: &ReplayBudget) -> std::io::Result<()> {
    let mut hint_text = hint.to_string();
    if !hint_text.ends_with('\n') {
        hint_text.push('\n');
    }
    fs::write(dir.join(HINT_FILENAME), hint_text)?;
    let mut budget_json =
        serde_json::to_string_pretty(budget).expect("budget always serializes");
    budget_json.push('\n');
    fs::write(dir.join(BUDGET_FILENAME), budget_json)?;
    Ok(())
}
