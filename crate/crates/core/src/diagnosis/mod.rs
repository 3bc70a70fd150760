//! The step-disciplined failure-localization protocol.
//!
//! A diagnosis session is a constrained conversation: the analyst (a model
//! behind [`ModelClient`], or the deterministic heuristic) may only issue
//! one single-line command per reply, chosen from a tiny grammar —
//! initialize the labels file, inspect one recorded step, append one stage
//! label, or finalize. Everything else is rejected with corrective
//! feedback, and the first reply must be the initialization or the session
//! ends immediately. Commands run against an [`EmulatedSandbox`], never a
//! real shell.

mod client;
mod heuristic;
mod sandbox;

pub use client::{ChatMessage, ClientError, ModelClient, Role, ScriptedClient};
pub use heuristic::{heuristic_diagnose, stage_features, StageFeatures};
pub use sandbox::{EmulatedSandbox, ExecutionRecord};

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{
    DiagnosisResult, EvidenceItem, StageDiagnosis, Trajectory, ValidationReport,
};
use crate::tree::StageSegmentation;

/// Fenced-block pattern; capture group 1 is the command text.
pub const ACTION_PATTERN: &str = r"```bash\s*\n([\s\S]*?)\n?```";

/// The labels file the analyst maintains.
pub const LABELS_FILENAME: &str = "mini_tracer_labels.json";

/// The read-only step log served by the sandbox.
pub const STEPS_FILENAME: &str = "steps.json";

/// The only accepted finalization command.
pub const FINALIZE_COMMAND: &str = "echo TRACER_FINAL_OUTPUT";

/// Maximum analyst replies per session.
pub const DEFAULT_TURN_BUDGET: usize = 50;

/// Consecutive malformed replies tolerated before aborting.
pub const MAX_CONSECUTIVE_FORMAT_ERRORS: usize = 3;

/// Outputs longer than this (in characters) are truncated in the middle.
pub const OUTPUT_TRUNCATION_LIMIT: usize = 10_000;

/// Characters kept at each end of a truncated output.
pub const TRUNCATION_KEEP: usize = 5_000;

/// Distinct stages that must hold an inspected step before finalizing
/// (capped by the number of stages in the run).
pub const MIN_INSPECTED_STAGES: usize = 3;

fn action_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(ACTION_PATTERN).expect("action pattern compiles"))
}

/// Extract the single command from an analyst reply, or the number of
/// fenced blocks actually found.
pub fn parse_response(text: &str) -> Result<String, usize> {
    let commands: Vec<&str> = action_regex()
        .captures_iter(text)
        .filter_map(|c| c.get(1).map(|m| m.as_str()))
        .collect();
    if commands.len() == 1 {
        Ok(commands[0].trim().to_string())
    } else {
        Err(commands.len())
    }
}

/// Corrective feedback for a reply with `found` fenced blocks.
pub fn format_error_feedback(found: usize) -> String {
    format!("Please always provide EXACTLY ONE action in triple backticks, found {found} actions.")
}

/// Why a syntactically well-formed command was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForbiddenReason {
    MultiLine,
    Chaining,
    Heredoc,
    BlockStatement,
    FullDump,
    InspectWriteFusion,
    OutOfScope,
}

impl ForbiddenReason {
    /// Sentence used in the rejection feedback.
    pub fn message(self) -> &'static str {
        match self {
            ForbiddenReason::MultiLine => "commands must be a single line",
            ForbiddenReason::Chaining => {
                "shell chaining operators (&& or ||) are not allowed; issue one simple command"
            }
            ForbiddenReason::Heredoc => "heredocs (<<) are not allowed",
            ForbiddenReason::BlockStatement => {
                "python block statements (for/while/if/def/class/with/try) are not allowed \
                 in -c payloads; use a single expression"
            }
            ForbiddenReason::FullDump => {
                "dumping the step log in bulk is not allowed; inspect exactly one record by index"
            }
            ForbiddenReason::InspectWriteFusion => {
                "reading the step log and writing labels in one command is not allowed; split them"
            }
            ForbiddenReason::OutOfScope => {
                "command is outside the allowed set (initialize, inspect one step, append a label, \
                 or finalize)"
            }
        }
    }
}

/// What a command is asking the sandbox to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandClass {
    /// Reset the labels file to an empty array.
    InitWrite,
    /// Print one step record by 0-based array index (negative from the end).
    Inspect { index: i64 },
    /// Append a stage label or overwrite the labels array.
    Write,
    /// End the session and hand over the labels.
    Finalize,
    /// Refused; the reason becomes feedback.
    Forbidden { reason: ForbiddenReason },
}

fn contains_outside_quotes(command: &str, needle: &str) -> bool {
    let bytes = command.as_bytes();
    let needle = needle.as_bytes();
    let mut in_string: Option<u8> = None;
    let mut escaped = false;
    for i in 0..bytes.len() {
        let b = bytes[i];
        if let Some(quote) = in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == quote {
                in_string = None;
            }
            continue;
        }
        if b == b'"' || b == b'\'' {
            in_string = Some(b);
        } else if bytes[i..].starts_with(needle) {
            return true;
        }
    }
    false
}

/// The quoted argument of a `python -c` command, when that is what this is.
fn python_payload(command: &str) -> Option<String> {
    let head = crate::commands::head_token(command)?;
    if head != "python" && head != "python3" {
        return None;
    }
    let at = command.find(" -c")?;
    let rest = command[at + 3..].trim_start();
    let mut chars = rest.chars();
    let first = chars.next()?;
    if first != '\'' && first != '"' {
        return Some(rest.split_whitespace().next().unwrap_or("").to_string());
    }
    let mut payload = String::new();
    let mut escaped = false;
    for c in chars {
        if escaped {
            payload.push(c);
            escaped = false;
        } else if c == '\\' {
            payload.push(c);
            escaped = true;
        } else if c == first {
            return Some(payload);
        } else {
            payload.push(c);
        }
    }
    Some(payload) // unterminated quote: treat the rest as the payload
}

/// Remove quoted string contents so keyword scans don't fire on prose.
fn strip_string_literals(payload: &str) -> String {
    let mut out = String::with_capacity(payload.len());
    let mut in_string: Option<char> = None;
    let mut escaped = false;
    for c in payload.chars() {
        if let Some(quote) = in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == quote {
                in_string = None;
            }
            continue;
        }
        if c == '\'' || c == '"' {
            in_string = Some(c);
        } else {
            out.push(c);
        }
    }
    out
}

fn block_statement_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(^|;)\s*(for|while|if|def|class|with|try)\b").expect("pattern compiles")
    })
}

fn subscript_indices(command: &str) -> Vec<i64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\[\s*(-?\d+)\s*\]").expect("pattern compiles"));
    let mut seen = Vec::new();
    for caps in re.captures_iter(command) {
        if let Ok(idx) = caps[1].parse::<i64>() {
            if !seen.contains(&idx) {
                seen.push(idx);
            }
        }
    }
    seen
}

fn writes_labels(command: &str) -> bool {
    if !command.contains(LABELS_FILENAME) {
        return false;
    }
    let squashed: String = command.chars().filter(|c| !c.is_whitespace()).collect();
    command.contains("json.dump(")
        || squashed.contains("'w')")
        || squashed.contains("\"w\")")
        || contains_outside_quotes(command, ">")
}

/// Classify one single command against the protocol grammar.
pub fn classify_command(command: &str) -> CommandClass {
    let cmd = command.trim();
    if cmd.is_empty() {
        return CommandClass::Forbidden { reason: ForbiddenReason::OutOfScope };
    }
    if cmd.contains('\n') {
        return CommandClass::Forbidden { reason: ForbiddenReason::MultiLine };
    }
    if cmd == FINALIZE_COMMAND {
        return CommandClass::Finalize;
    }
    if contains_outside_quotes(cmd, "&&") || contains_outside_quotes(cmd, "||") {
        return CommandClass::Forbidden { reason: ForbiddenReason::Chaining };
    }
    if contains_outside_quotes(cmd, "<<") {
        return CommandClass::Forbidden { reason: ForbiddenReason::Heredoc };
    }
    if let Some(payload) = python_payload(cmd) {
        if block_statement_regex().is_match(&strip_string_literals(&payload)) {
            return CommandClass::Forbidden { reason: ForbiddenReason::BlockStatement };
        }
    }
    let reads_steps = cmd.contains(STEPS_FILENAME);
    let writes = writes_labels(cmd);
    if reads_steps && writes {
        return CommandClass::Forbidden { reason: ForbiddenReason::InspectWriteFusion };
    }
    if reads_steps {
        let indices = subscript_indices(cmd);
        return match indices.as_slice() {
            [index] => CommandClass::Inspect { index: *index },
            _ => CommandClass::Forbidden { reason: ForbiddenReason::FullDump },
        };
    }
    if writes {
        let squashed: String = cmd.chars().filter(|c| !c.is_whitespace()).collect();
        if !cmd.contains('{') && squashed.contains("[]") {
            return CommandClass::InitWrite;
        }
        return CommandClass::Write;
    }
    CommandClass::Forbidden { reason: ForbiddenReason::OutOfScope }
}

/// Middle-truncate an output to [`OUTPUT_TRUNCATION_LIMIT`] characters.
pub fn truncate_output(output: &str) -> String {
    let total = output.chars().count();
    if total <= OUTPUT_TRUNCATION_LIMIT {
        return output.to_string();
    }
    let head: String = output.chars().take(TRUNCATION_KEEP).collect();
    let tail: String = output.chars().skip(total - TRUNCATION_KEEP).collect();
    let elided = total - 2 * TRUNCATION_KEEP;
    format!("{head}\n... {elided} characters elided ...\n{tail}")
}

/// Render an execution result the way the environment reports it.
pub fn render_observation(record: &ExecutionRecord) -> String {
    format!(
        "<returncode>{}</returncode>\n<output>\n{}\n</output>",
        record.returncode,
        truncate_output(&record.output)
    )
}

/// Check a label set against the protocol's evidence discipline.
pub fn validate_labels(
    labels: &[StageDiagnosis],
    inspected: &BTreeSet<u32>,
    seg: &StageSegmentation,
) -> ValidationReport {
    let mut violations = Vec::new();
    if labels.is_empty() && inspected.is_empty() {
        violations.push("labels are empty but no steps were inspected".to_string());
    }
    for label in labels {
        let (a, b) = label.stage_id;
        if !seg.spans.iter().any(|s| s.bounds() == (a, b)) {
            violations.push(format!("stage [{a},{b}] does not match any provided span"));
        }
        if label.reasoning.trim().is_empty() {
            violations.push(format!("stage [{a},{b}] has empty reasoning"));
        }
        for step_id in label.labeled_steps() {
            if step_id < a || step_id > b {
                violations.push(format!("step {step_id} lies outside its stage [{a},{b}]"));
            }
            if !inspected.contains(&step_id) {
                violations.push(format!("step {step_id} is labeled but was never inspected"));
            }
        }
    }
    ValidationReport { violations }
}

/// Session-level knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub max_turns: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { max_turns: DEFAULT_TURN_BUDGET }
    }
}

/// How a diagnosis session ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Termination {
    /// Clean finalization with validated labels.
    Finalized,
    /// Turn budget ran out; labels written so far are kept.
    BudgetExhausted,
    /// The first reply was not the initialization command.
    InitViolation,
    /// Too many consecutive malformed replies.
    RepeatedFormatErrors,
    /// The backing client failed.
    ClientFailure(String),
}

/// Complete record of one diagnosis session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRun {
    pub termination: Termination,
    pub result: DiagnosisResult,
    pub validation: ValidationReport,
    pub transcript: Vec<ChatMessage>,
    pub turns_used: usize,
    pub inspected: BTreeSet<u32>,
}

/// Evidence excerpts for up to `cap` of the given steps, in id order.
pub fn collect_evidence(
    t: &Trajectory,
    step_ids: impl IntoIterator<Item = u32>,
    cap: usize,
) -> BTreeSet<EvidenceItem> {
    let mut evidence = BTreeSet::new();
    let ordered: BTreeSet<u32> = step_ids.into_iter().collect();
    for step_id in ordered {
        if evidence.len() >= cap {
            break;
        }
        let Some(step) = t.step(step_id) else { continue };
        let source = step
            .observation
            .as_ref()
            .map(|o| o.content.as_str())
            .filter(|c| !c.trim().is_empty())
            .unwrap_or(step.action.content.as_str());
        let excerpt: String = source.chars().take(200).collect();
        evidence.insert(EvidenceItem { step_id, excerpt });
    }
    evidence
}

/// Human-readable stage list for prompts.
fn describe_spans(seg: &StageSegmentation) -> String {
    seg.spans
        .iter()
        .map(|s| format!("- {}: steps {}-{}", s.stage, s.start_step_id, s.end_step_id))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Required distinct inspected stages before finalization is allowed.
pub fn required_inspected_stages(seg: &StageSegmentation) -> usize {
    MIN_INSPECTED_STAGES.min(seg.spans.len())
}

/// System prompt stating the discipline, the file contract, and the grammar.
pub fn build_system_prompt(
    seg: &StageSegmentation,
    step_count: usize,
    config: &ProtocolConfig,
) -> String {
    let required = required_inspected_stages(seg);
    format!(
        "You are a trace analyst. A coding agent attempted a software task and its run was \
         recorded as an ordered list of executed steps. Work out where the run first went wrong \
         and which steps were incorrect or unuseful, by inspecting the record one step at a time \
         and writing stage labels.\n\
         \n\
         Files in your working directory:\n\
         - {steps}: read-only JSON array of {step_count} step records in execution order. Array \
         index i holds the record with step_id i+1. Each record has step_id, action_ref \
         (content, thought) and observation_ref (content, returncode).\n\
         - {labels}: your findings. You create it and you maintain it; it is write-only.\n\
         \n\
         Reply format, strictly enforced:\n\
         - Every reply must contain EXACTLY ONE shell command in a ```bash fenced block.\n\
         - The command must be a single line. No && or ||, no heredocs (<<), and no python \
         block statements (for/while/if/def/class/with/try) in -c payloads.\n\
         - Never print the step log in bulk; inspect exactly one record per command.\n\
         - Never read {steps} and write {labels} in the same command.\n\
         \n\
         Allowed commands:\n\
         1. Initialize (your FIRST command, before anything else):\n\
         echo '[]' > {labels}\n\
         2. Inspect one step by array index IDX:\n\
         python -c 'import json; print(json.dumps(json.load(open(\"{steps}\"))[IDX], indent=2))'\n\
         3. Append one stage label (single-quoted -c payload, double-quoted JSON inside):\n\
         python -c 'import json; p=\"{labels}\"; d=json.load(open(p)); d.append({{\"stage_id\": \
         [START, END], \"incorrect_step_ids\": [], \"unuseful_step_ids\": [], \"reasoning\": \
         \"...\"}}); json.dump(d, open(p,\"w\"))'\n\
         4. Finalize when your labels are complete:\n\
         {finalize}\n\
         \n\
         Labeling rules:\n\
         - stage_id must exactly equal one of the stage spans given in the task message \
         (inclusive 1-indexed step ids).\n\
         - Label a step only after you have inspected it.\n\
         - incorrect steps changed project state wrongly; unuseful steps consumed budget without \
         progress. An empty labels file is a legitimate verdict for a clean run, but you must \
         still inspect before finalizing.\n\
         - reasoning must be non-empty for every appended stage.\n\
         - Before finalizing, inspect steps in at least {required} distinct stage(s).\n\
         - You have {max_turns} replies in total. Outputs longer than {limit} characters are \
         truncated in the middle.",
        steps = STEPS_FILENAME,
        labels = LABELS_FILENAME,
        finalize = FINALIZE_COMMAND,
        step_count = step_count,
        required = required,
        max_turns = config.max_turns,
        limit = OUTPUT_TRUNCATION_LIMIT,
    )
}

/// Opening user message: the task, the outcome, and the stage spans.
pub fn build_task_message(task: &str, t: &Trajectory, seg: &StageSegmentation) -> String {
    format!(
        "Task given to the agent:\n{task}\n\nRun outcome: {outcome}. The run has {n} steps \
         grouped into these stages:\n{spans}\n\nInitialize the labels file now, then investigate.",
        outcome = t.outcome,
        n = t.steps.len(),
        spans = describe_spans(seg),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    NeedsInit,
    Active,
}

/// Drive one full diagnosis session against a client.
pub fn run_diagnosis(
    t: &Trajectory,
    seg: &StageSegmentation,
    task: &str,
    client: &mut dyn ModelClient,
    config: &ProtocolConfig,
) -> DiagnosisRun {
    let system = build_system_prompt(seg, t.steps.len(), config);
    let mut transcript = vec![ChatMessage::user(build_task_message(task, t, seg))];
    let mut sandbox = EmulatedSandbox::new(&t.steps);
    let mut phase = Phase::NeedsInit;
    let mut consecutive_format_errors = 0usize;
    let mut turns_used = 0usize;

    let finish = |termination: Termination,
                  sandbox: EmulatedSandbox,
                  transcript: Vec<ChatMessage>,
                  turns_used: usize| {
        let validation = validate_labels(&sandbox.labels, &sandbox.inspected, seg);
        let evidence = collect_evidence(
            t,
            sandbox.labels.iter().flat_map(|l| l.labeled_steps()),
            5,
        );
        DiagnosisRun {
            termination,
            result: DiagnosisResult { stages: sandbox.labels, evidence },
            validation,
            transcript,
            turns_used,
            inspected: sandbox.inspected,
        }
    };

    while turns_used < config.max_turns {
        let response = match client.complete(&system, &transcript) {
            Ok(r) => r,
            Err(e) => {
                return finish(Termination::ClientFailure(e.0), sandbox, transcript, turns_used)
            }
        };
        turns_used += 1;
        transcript.push(ChatMessage::assistant(&response));

        let command = match parse_response(&response) {
            Ok(cmd) => {
                consecutive_format_errors = 0;
                cmd
            }
            Err(found) => {
                if phase == Phase::NeedsInit {
                    return finish(Termination::InitViolation, sandbox, transcript, turns_used);
                }
                consecutive_format_errors += 1;
                if consecutive_format_errors >= MAX_CONSECUTIVE_FORMAT_ERRORS {
                    return finish(
                        Termination::RepeatedFormatErrors,
                        sandbox,
                        transcript,
                        turns_used,
                    );
                }
                transcript.push(ChatMessage::user(format_error_feedback(found)));
                continue;
            }
        };

        let class = classify_command(&command);
        if phase == Phase::NeedsInit {
            // The discipline is strict at the door: anything but a clean
            // initialization ends the session.
            if class != CommandClass::InitWrite {
                return finish(Termination::InitViolation, sandbox, transcript, turns_used);
            }
            let record = sandbox.execute(&class, &command);
            transcript.push(ChatMessage::user(render_observation(&record)));
            phase = Phase::Active;
            continue;
        }

        match class {
            CommandClass::Forbidden { reason } => {
                transcript
                    .push(ChatMessage::user(format!("Command rejected: {}", reason.message())));
            }
            CommandClass::Finalize => {
                let required = required_inspected_stages(seg);
                let covered = seg
                    .spans
                    .iter()
                    .filter(|s| sandbox.inspected.iter().any(|id| s.contains(*id)))
                    .count();
                if covered < required {
                    transcript.push(ChatMessage::user(format!(
                        "Cannot finalize yet: inspected steps cover {covered} of {total} stages; \
                         inspect steps in at least {required} distinct stages first.",
                        total = seg.spans.len(),
                    )));
                    continue;
                }
                let validation = validate_labels(&sandbox.labels, &sandbox.inspected, seg);
                if !validation.is_valid() {
                    let bullets = validation
                        .violations
                        .iter()
                        .map(|v| format!("- {v}"))
                        .collect::<Vec<_>>()
                        .join("\n");
                    transcript.push(ChatMessage::user(format!(
                        "Labels failed validation:\n{bullets}\nFix the labels, then finalize again."
                    )));
                    continue;
                }
                return finish(Termination::Finalized, sandbox, transcript, turns_used);
            }
            CommandClass::InitWrite | CommandClass::Inspect { .. } | CommandClass::Write => {
                let record = sandbox.execute(&class, &command);
                transcript.push(ChatMessage::user(render_observation(&record)));
            }
        }
    }
    finish(Termination::BudgetExhausted, sandbox, transcript, turns_used)
}
