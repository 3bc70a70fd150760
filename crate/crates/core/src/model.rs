//! Core trace domain: step records, trajectories, stage vocabulary, label
//! containers, and the canonical JSON codecs shared by every other module.
//!
//! The on-disk encoding of a step array (`steps.json`) is an ordered JSON
//! array of objects with exactly the keys `step_id`, `action_ref`, and
//! `observation_ref` (plus `token_usage` when a dump reports per-step
//! usage). Unknown keys inside the two refs are preserved round-trip but
//! carry no meaning here.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Assistant half of a step: the issued command plus optional thought text.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionRecord {
    /// Shell command exactly as issued.
    pub content: String,
    /// Free-form reasoning that accompanied (or preceded) the command.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    /// Keys carried by the source dump that we keep but never interpret.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ActionRecord {
    /// Action with just a command and no thought text.
    pub fn command(content: impl Into<String>) -> Self {
        ActionRecord { content: content.into(), thought: None, extra: Default::default() }
    }
}

/// Environment half of a step: feedback text plus optional return code.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservationRecord {
    /// Raw output the environment produced for the command.
    pub content: String,
    /// Process exit status when the dump recorded one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub returncode: Option<i32>,
    /// Keys carried by the source dump that we keep but never interpret.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ObservationRecord {
    /// Observation with content and a return code.
    pub fn new(content: impl Into<String>, returncode: i32) -> Self {
        ObservationRecord {
            content: content.into(),
            returncode: Some(returncode),
            extra: Default::default(),
        }
    }
}

/// One executed command with its observation, 1-indexed within the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Position in the run, starting at 1 with no gaps.
    pub step_id: u32,
    #[serde(rename = "action_ref")]
    pub action: ActionRecord,
    /// `null` on disk when the environment never answered.
    #[serde(rename = "observation_ref")]
    pub observation: Option<ObservationRecord>,
    /// Tokens the backbone spent producing this step, when reported.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_usage: Option<u64>,
}

impl StepRecord {
    /// Step with a command and an observation carrying a return code.
    pub fn new(step_id: u32, command: impl Into<String>, output: impl Into<String>, rc: i32) -> Self {
        StepRecord {
            step_id,
            action: ActionRecord::command(command),
            observation: Some(ObservationRecord::new(output, rc)),
            token_usage: None,
        }
    }

    /// Return code of the observation, when both exist.
    pub fn returncode(&self) -> Option<i32> {
        self.observation.as_ref().and_then(|o| o.returncode)
    }

    /// True when the observation reports a non-zero exit status.
    pub fn failed(&self) -> bool {
        matches!(self.returncode(), Some(rc) if rc != 0)
    }
}

/// Final verdict of the original agent run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Solved,
    Unsolved,
    /// Extraction defers judgment until test artifacts are parsed.
    Unknown,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Solved => "solved",
            Outcome::Unsolved => "unsolved",
            Outcome::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Run-level quality flags set from explicit artifact markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunFlag {
    TimedOut,
    TruncatedGeneration,
    EnvCorrupt,
}

/// Normalized run: metadata plus the ordered step array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub framework_id: String,
    pub backbone_id: String,
    pub outcome: Outcome,
    pub run_flags: BTreeSet<RunFlag>,
    /// Total backbone tokens for the run, when the dump reported them.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub total_tokens: Option<u64>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    /// Step lookup by 1-indexed id; `None` when out of range.
    pub fn step(&self, step_id: u32) -> Option<&StepRecord> {
        if step_id == 0 {
            return None;
        }
        let idx = (step_id - 1) as usize;
        self.steps.get(idx).filter(|s| s.step_id == step_id)
    }
}

/// Whether a step only gathered information or mutated state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Explore,
    Change,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Explore => "explore",
            StepKind::Change => "change",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explore" => Ok(StepKind::Explore),
            "change" => Ok(StepKind::Change),
            other => Err(format!("unknown step kind: {other}")),
        }
    }
}

/// Canonical five-stage vocabulary every run is segmented into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLabel {
    EnvironmentVerification,
    DependencyInstallation,
    InspectionDebugging,
    Patching,
    Verification,
}

impl StageLabel {
    /// All labels in canonical order.
    pub const ALL: [StageLabel; 5] = [
        StageLabel::EnvironmentVerification,
        StageLabel::DependencyInstallation,
        StageLabel::InspectionDebugging,
        StageLabel::Patching,
        StageLabel::Verification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageLabel::EnvironmentVerification => "environment_verification",
            StageLabel::DependencyInstallation => "dependency_installation",
            StageLabel::InspectionDebugging => "inspection_debugging",
            StageLabel::Patching => "patching",
            StageLabel::Verification => "verification",
        }
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown stage label: {s}"))
    }
}

/// Taxonomy of first causes a diagnosis can attribute a failure to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    EnvSetup,
    DependencyResolution,
    MislocalizedEdit,
    IncorrectHypothesis,
    VerificationMisinterpretation,
    UnproductiveLooping,
}

impl ErrorType {
    pub const ALL: [ErrorType; 6] = [
        ErrorType::EnvSetup,
        ErrorType::DependencyResolution,
        ErrorType::MislocalizedEdit,
        ErrorType::IncorrectHypothesis,
        ErrorType::VerificationMisinterpretation,
        ErrorType::UnproductiveLooping,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::EnvSetup => "env_setup",
            ErrorType::DependencyResolution => "dependency_resolution",
            ErrorType::MislocalizedEdit => "mislocalized_edit",
            ErrorType::IncorrectHypothesis => "incorrect_hypothesis",
            ErrorType::VerificationMisinterpretation => "verification_misinterpretation",
            ErrorType::UnproductiveLooping => "unproductive_looping",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorType::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown error type: {s}"))
    }
}

/// One labeled stage in a diagnosis output; mirrors the labels-file schema
/// (`stage_id`, `incorrect_step_ids`, `unuseful_step_ids`, `reasoning`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDiagnosis {
    /// Inclusive `[start, end]` step range, which must equal a provided span.
    pub stage_id: (u32, u32),
    /// Steps whose state change was wrong or harmful.
    pub incorrect_step_ids: BTreeSet<u32>,
    /// Steps that consumed budget without advancing the task.
    pub unuseful_step_ids: BTreeSet<u32>,
    pub reasoning: String,
}

impl StageDiagnosis {
    /// Every labeled step id in this stage entry.
    pub fn labeled_steps(&self) -> impl Iterator<Item = u32> + '_ {
        self.incorrect_step_ids.iter().chain(self.unuseful_step_ids.iter()).copied()
    }
}

/// On-disk labels file: an ordered array of stage entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelFile(pub Vec<StageDiagnosis>);

impl LabelFile {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Union of all labeled step ids across stage entries.
    pub fn labeled_steps(&self) -> BTreeSet<u32> {
        self.0.iter().flat_map(|s| s.labeled_steps()).collect()
    }
}

/// Supporting excerpt tied to an inspected step.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub step_id: u32,
    pub excerpt: String,
}

/// Full output of a diagnosis pass: stage labels plus the evidence set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub stages: Vec<StageDiagnosis>,
    pub evidence: BTreeSet<EvidenceItem>,
}

impl DiagnosisResult {
    /// Result carrying no labels and no evidence (nothing to localize).
    pub fn empty() -> Self {
        DiagnosisResult::default()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty() && self.evidence.is_empty()
    }

    /// Union of incorrect and unuseful ids — the predicted step set.
    pub fn labeled_steps(&self) -> BTreeSet<u32> {
        self.stages.iter().flat_map(|s| s.labeled_steps()).collect()
    }

    /// Union of incorrect ids only.
    pub fn incorrect_steps(&self) -> BTreeSet<u32> {
        self.stages.iter().flat_map(|s| s.incorrect_step_ids.iter().copied()).collect()
    }

    /// Union of unuseful ids only.
    pub fn unuseful_steps(&self) -> BTreeSet<u32> {
        self.stages.iter().flat_map(|s| s.unuseful_step_ids.iter().copied()).collect()
    }

    /// The labels-file view of this result (evidence is session-side only).
    pub fn to_label_file(&self) -> LabelFile {
        LabelFile(self.stages.clone())
    }
}

/// Ground-truth annotation for one stage span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldStage {
    pub stage: StageLabel,
    pub stage_id: (u32, u32),
    pub incorrect_step_ids: BTreeSet<u32>,
    pub unuseful_step_ids: BTreeSet<u32>,
    pub reasoning: String,
}

/// Ground-truth labels for a run (`gold_labels.json`): stage entries in the
/// labels-file shape plus the critical step and error type, when any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub stages: Vec<GoldStage>,
    pub error_critical_step: Option<u32>,
    pub error_type: Option<ErrorType>,
    /// Outcome of the annotated run, used for stratified analytics.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub outcome: Option<Outcome>,
}

impl GoldAnnotation {
    /// Annotation with stage spans only and no error labels.
    pub fn clean(stages: Vec<GoldStage>, outcome: Outcome) -> Self {
        GoldAnnotation { stages, error_critical_step: None, error_type: None, outcome: Some(outcome) }
    }

    /// Ordered `(label, span)` pairs.
    pub fn stage_spans(&self) -> Vec<(StageLabel, (u32, u32))> {
        self.stages.iter().map(|s| (s.stage, s.stage_id)).collect()
    }

    /// Union of gold incorrect ids.
    pub fn incorrect_step_ids(&self) -> BTreeSet<u32> {
        self.stages.iter().flat_map(|s| s.incorrect_step_ids.iter().copied()).collect()
    }

    /// Union of gold unuseful ids.
    pub fn unuseful_step_ids(&self) -> BTreeSet<u32> {
        self.stages.iter().flat_map(|s| s.unuseful_step_ids.iter().copied()).collect()
    }

    /// Union of incorrect and unuseful — the gold step set for scoring.
    pub fn labeled_steps(&self) -> BTreeSet<u32> {
        let mut all = self.incorrect_step_ids();
        all.extend(self.unuseful_step_ids());
        all
    }

    /// Stage entry whose span contains `step_id`.
    pub fn enclosing_stage(&self, step_id: u32) -> Option<&GoldStage> {
        self.stages.iter().find(|s| s.stage_id.0 <= step_id && step_id <= s.stage_id.1)
    }
}

/// List of human-readable invariant violations; empty means valid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            f.write_str(v)?;
        }
        Ok(())
    }
}

/// Check the structural invariants of a normalized trajectory: contiguous
/// 1-indexed step ids, non-empty actions, and flag/outcome consistency.
pub fn validate_trajectory(t: &Trajectory) -> ValidationReport {
    let mut violations = Vec::new();
    if t.steps.is_empty() {
        violations.push("trajectory has no steps".to_string());
    }
    let mut expected: u32 = 1;
    for step in &t.steps {
        if step.step_id == expected {
            expected += 1;
        } else if step.step_id > expected {
            violations.push(format!("gap at id {expected}"));
            expected = step.step_id + 1;
        } else {
            violations.push(format!(
                "duplicate or out-of-order step id {} (expected {expected})",
                step.step_id
            ));
        }
        if step.action.content.trim().is_empty() {
            violations.push(format!("step {} has an empty action", step.step_id));
        }
    }
    if let Some(first) = t.steps.first() {
        if first.step_id != 1 {
            violations.insert(0, format!("step ids must start at 1 (first id is {})", first.step_id));
        }
    }
    if t.outcome == Outcome::Solved && t.run_flags.contains(&RunFlag::TimedOut) {
        violations.push("outcome is solved but run_flags contain timed_out".to_string());
    }
    ValidationReport { violations }
}

/// Serialize a step array in the canonical `steps.json` layout.
pub fn steps_to_json(steps: &[StepRecord]) -> String {
    let mut s = serde_json::to_string_pretty(steps).expect("step records always serialize");
    s.push('\n');
    s
}

/// Parse a canonical `steps.json` document.
pub fn steps_from_json(text: &str) -> Result<Vec<StepRecord>, serde_json::Error> {
    serde_json::from_str(text)
}
