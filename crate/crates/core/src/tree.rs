//! Hierarchical trace tree and stage segmentation over a normalized run,
//! plus the on-disk index artifacts (`steps.json`, `stage_ranges.json`,
//! `tree.md`) and their parse-back codecs.
//!
//! Tree construction follows the current-state rule: a cursor starts at the
//! synthetic root; an exploration step attaches as a leaf under the cursor;
//! a state-changing step attaches as a child of the cursor and becomes the
//! new cursor. Consequently `depth(node) = 1 + number of Change steps
//! strictly before it`, all-exploration runs form a star, and all-change
//! runs form a chain.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commands::{classify_kind, stage_hint};
use crate::model::{StageLabel, StepKind, StepRecord, Trajectory};

/// Command prefix length kept in a node summary.
pub const SUMMARY_COMMAND_CHARS: usize = 80;

/// Edge to the node one level up; the synthetic root is not a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parent {
    Root,
    Step(u32),
}

/// One step in the trace tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub step_id: u32,
    pub kind: StepKind,
    /// First 80 command characters plus a one-token outcome tag.
    pub summary: String,
    pub parent: Parent,
    /// Root children sit at depth 1.
    pub depth: u32,
}

/// Trace tree for a run; `nodes[i]` holds step `i + 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceTree {
    pub nodes: Vec<TreeNode>,
}

impl TraceTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node for a 1-indexed step id.
    pub fn node(&self, step_id: u32) -> Option<&TreeNode> {
        step_id
            .checked_sub(1)
            .and_then(|i| self.nodes.get(i as usize))
            .filter(|n| n.step_id == step_id)
    }

    /// Step ids whose parent is `parent`.
    pub fn children(&self, parent: Parent) -> Vec<u32> {
        self.nodes.iter().filter(|n| n.parent == parent).map(|n| n.step_id).collect()
    }
}

/// Maximal run of consecutive steps sharing one stage label (inclusive,
/// 1-indexed bounds). Field names match the `stage_ranges.json` schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpan {
    pub stage: StageLabel,
    pub start_step_id: u32,
    pub end_step_id: u32,
}

impl StageSpan {
    pub fn bounds(&self) -> (u32, u32) {
        (self.start_step_id, self.end_step_id)
    }

    pub fn contains(&self, step_id: u32) -> bool {
        self.start_step_id <= step_id && step_id <= self.end_step_id
    }
}

/// Ordered, non-overlapping spans jointly covering steps 1..=N.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageSegmentation {
    pub spans: Vec<StageSpan>,
}

impl StageSegmentation {
    /// Index and span containing `step_id`.
    pub fn span_of(&self, step_id: u32) -> Option<(usize, &StageSpan)> {
        self.spans.iter().enumerate().find(|(_, s)| s.contains(step_id))
    }

    /// True when spans are ordered, adjacent, merged, and cover 1..=n.
    pub fn covers(&self, n: u32) -> bool {
        if n == 0 {
            return self.spans.is_empty();
        }
        let mut next = 1u32;
        let mut prev_stage: Option<StageLabel> = None;
        for span in &self.spans {
            if span.start_step_id != next || span.end_step_id < span.start_step_id {
                return false;
            }
            if prev_stage == Some(span.stage) {
                return false; // adjacent equal labels must be merged
            }
            prev_stage = Some(span.stage);
            next = span.end_step_id + 1;
        }
        next == n + 1
    }
}

/// Kind classification for every step of a run, in order.
pub fn classify_steps(t: &Trajectory) -> Vec<StepKind> {
    t.steps.iter().map(|s| classify_kind(&s.action.content)).collect()
}

fn outcome_tag(step: &StepRecord) -> &'static str {
    match step.returncode() {
        Some(0) => "ok",
        Some(_) => "err",
        None => "?",
    }
}

fn step_summary(step: &StepRecord) -> String {
    let flat: String = step
        .action
        .content
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    let prefix: String = flat.chars().take(SUMMARY_COMMAND_CHARS).collect();
    format!("{} [{}]", prefix.trim_end(), outcome_tag(step))
}

/// Build the trace tree under the current-state rule.
///
/// `kinds` must classify exactly the steps of `t`, in order.
pub fn build_tree(t: &Trajectory, kinds: &[StepKind]) -> TraceTree {
    assert_eq!(t.steps.len(), kinds.len(), "one kind per step");
    let mut nodes = Vec::with_capacity(t.steps.len());
    let mut cursor = Parent::Root;
    let mut cursor_depth = 0u32;
    for (step, &kind) in t.steps.iter().zip(kinds) {
        let node = TreeNode {
            step_id: step.step_id,
            kind,
            summary: step_summary(step),
            parent: cursor,
            depth: cursor_depth + 1,
        };
        if kind == StepKind::Change {
            cursor = Parent::Step(step.step_id);
            cursor_depth += 1;
        }
        nodes.push(node);
    }
    TraceTree { nodes }
}

/// Rebuild a tree from `(step_id, kind, summary)` lines via the same
/// current-state rule; used by the `tree.md` parser.
pub fn rebuild_tree(lines: &[(u32, StepKind, String)]) -> TraceTree {
    let mut nodes = Vec::with_capacity(lines.len());
    let mut cursor = Parent::Root;
    let mut cursor_depth = 0u32;
    for (step_id, kind, summary) in lines {
        nodes.push(TreeNode {
            step_id: *step_id,
            kind: *kind,
            summary: summary.clone(),
            parent: cursor,
            depth: cursor_depth + 1,
        });
        if *kind == StepKind::Change {
            cursor = Parent::Step(*step_id);
            cursor_depth += 1;
        }
    }
    TraceTree { nodes }
}

/// Segment a run into the canonical five-stage vocabulary and merge
/// adjacent equal labels into spans.
pub fn segment_stages(t: &Trajectory, kinds: &[StepKind]) -> StageSegmentation {
    assert_eq!(t.steps.len(), kinds.len(), "one kind per step");
    let mut spans: Vec<StageSpan> = Vec::new();
    let mut patched_before = false;
    for step in &t.steps {
        let stage = stage_hint(&step.action.content, patched_before);
        if stage == StageLabel::Patching {
            patched_before = true;
        }
        match spans.last_mut() {
            Some(last) if last.stage == stage && last.end_step_id + 1 == step.step_id => {
                last.end_step_id = step.step_id;
            }
            _ => spans.push(StageSpan {
                stage,
                start_step_id: step.step_id,
                end_step_id: step.step_id,
            }),
        }
    }
    StageSegmentation { spans }
}

/// Replace the heuristic segmentation with gold spans when a run directory
/// carries them; the override is verbatim.
pub fn segmentation_from_gold(gold: &crate::model::GoldAnnotation) -> StageSegmentation {
    StageSegmentation {
        spans: gold
            .stages
            .iter()
            .map(|s| StageSpan {
                stage: s.stage,
                start_step_id: s.stage_id.0,
                end_step_id: s.stage_id.1,
            })
            .collect(),
    }
}

/// Render the markdown navigation index: one `- [stepN] (kind) summary`
/// line per step, indented two spaces per tree depth, with a comment line
/// marking the start of each stage span.
pub fn render_tree_md(tree: &TraceTree, seg: &StageSegmentation) -> String {
    let mut out = String::new();
    for node in &tree.nodes {
        if let Some(span) = seg.spans.iter().find(|s| s.start_step_id == node.step_id) {
            out.push_str(&format!(
                "<!-- stage: {} [{},{}] -->\n",
                span.stage, span.start_step_id, span.end_step_id
            ));
        }
        for _ in 0..node.depth {
            out.push_str("  ");
        }
        out.push_str(&format!("- [step{}] ({}) {}\n", node.step_id, node.kind, node.summary));
    }
    out
}

/// Everything recoverable from a `tree.md` document.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTreeMd {
    pub lines: Vec<(u32, StepKind, String)>,
    pub spans: Vec<StageSpan>,
}

/// Parse failure for the markdown index.
#[derive(Debug, Error)]
pub enum TreeMdError {
    #[error("line {line}: not a step or stage-marker line: {text:?}")]
    UnrecognizedLine { line: usize, text: String },
    #[error("line {line}: {reason}")]
    BadField { line: usize, reason: String },
}

/// Parse a `tree.md` document back into step lines and stage spans.
pub fn parse_tree_md(text: &str) -> Result<ParsedTreeMd, TreeMdError> {
    let mut lines = Vec::new();
    let mut spans = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if let Some(rest) = raw.strip_prefix("<!-- stage: ") {
            let body = rest.strip_suffix(" -->").ok_or_else(|| TreeMdError::BadField {
                line: line_no,
                reason: "unterminated stage marker".into(),
            })?;
            let (label, range) =
                body.split_once(" [").ok_or_else(|| TreeMdError::BadField {
                    line: line_no,
                    reason: "stage marker missing range".into(),
                })?;
            let range = range.strip_suffix(']').ok_or_else(|| TreeMdError::BadField {
                line: line_no,
                reason: "stage range missing closing bracket".into(),
            })?;
            let (a, b) = range.split_once(',').ok_or_else(|| TreeMdError::BadField {
                line: line_no,
                reason: "stage range needs two bounds".into(),
            })?;
            let stage = label.parse::<StageLabel>().map_err(|e| TreeMdError::BadField {
                line: line_no,
                reason: e,
            })?;
            let parse_bound = |s: &str| {
                s.trim().parse::<u32>().map_err(|_| TreeMdError::BadField {
                    line: line_no,
                    reason: format!("bad stage bound: {s:?}"),
                })
            };
            spans.push(StageSpan {
                stage,
                start_step_id: parse_bound(a)?,
                end_step_id: parse_bound(b)?,
            });
            continue;
        }
        let body = raw.trim_start();
        let Some(rest) = body.strip_prefix("- [step") else {
            return Err(TreeMdError::UnrecognizedLine { line: line_no, text: raw.to_string() });
        };
        let (id_text, rest) = rest.split_once("] (").ok_or_else(|| TreeMdError::BadField {
            line: line_no,
            reason: "missing kind marker".into(),
        })?;
        let (kind_text, summary) = rest.split_once(") ").ok_or_else(|| TreeMdError::BadField {
            line: line_no,
            reason: "missing summary".into(),
        })?;
        let step_id = id_text.parse::<u32>().map_err(|_| TreeMdError::BadField {
            line: line_no,
            reason: format!("bad step id: {id_text:?}"),
        })?;
        let kind = kind_text.parse::<StepKind>().map_err(|e| TreeMdError::BadField {
            line: line_no,
            reason: e,
        })?;
        lines.push((step_id, kind, summary.to_string()));
    }
    Ok(ParsedTreeMd { lines, spans })
}

/// Paths of the three index artifacts written for a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexArtifacts {
    pub steps_json: PathBuf,
    pub stage_ranges: PathBuf,
    pub tree_md: PathBuf,
}

/// Serialize spans in the canonical `stage_ranges.json` layout.
pub fn stage_ranges_to_json(seg: &StageSegmentation) -> String {
    let mut s = serde_json::to_string_pretty(&seg.spans).expect("spans always serialize");
    s.push('\n');
    s
}

/// Parse a canonical `stage_ranges.json` document.
pub fn stage_ranges_from_json(text: &str) -> Result<StageSegmentation, serde_json::Error> {
    Ok(StageSegmentation { spans: serde_json::from_str(text)? })
}

/// Write `steps.json`, `stage_ranges.json`, and `tree.md` into `out_dir`.
/// Output is deterministic: identical inputs produce byte-identical files.
pub fn emit_artifacts(
    steps: &[StepRecord],
    tree: &TraceTree,
    seg: &StageSegmentation,
    out_dir: &Path,
) -> io::Result<IndexArtifacts> {
    fs::create_dir_all(out_dir)?;
    let artifacts = IndexArtifacts {
        steps_json: out_dir.join("steps.json"),
        stage_ranges: out_dir.join("stage_ranges.json"),
        tree_md: out_dir.join("tree.md"),
    };
    fs::write(&artifacts.steps_json, crate::model::steps_to_json(steps))?;
    fs::write(&artifacts.stage_ranges, stage_ranges_to_json(seg))?;
    fs::write(&artifacts.tree_md, render_tree_md(tree, seg))?;
    Ok(artifacts)
}
