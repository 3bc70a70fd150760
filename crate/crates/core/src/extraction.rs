//! Run-directory ingestion: layout discovery, format fingerprinting, the
//! parser registry, dialect normalization into [`Trajectory`] values, and
//! the corpus quality filters.
//!
//! A format fingerprint is a sha256 digest over the sorted set of distinct
//! key paths (key segments only, depth ≤ 3) of the step-bearing artifact,
//! with array elements collapsed to a `[]` wildcard. That makes it stable
//! under value changes and run length, and sensitive to schema changes.
//! Unknown fingerprints are never guessed at: they fail with
//! [`ExtractError::UnknownFormat`] until a descriptor is registered.
//!
//! Two dialects ship built in: the canonical step-array schema
//! (`steps.json`) and a chat-transcript JSONL dump (alternating
//! role/content records, commands in ```bash fences).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::model::{
    ActionRecord, ObservationRecord, Outcome, RunFlag, StepRecord, Trajectory,
};

/// Solved runs shorter than this are rejected as trivially correct.
pub const SHORT_CORRECT_MAX_STEPS: usize = 10;

/// Sidecar file that is the only allowed source of the env-corrupt flag.
pub const RUN_FLAGS_FILENAME: &str = "run_flags.json";

/// Metadata sidecar written next to canonical `steps.json` files.
pub const RUN_META_FILENAME: &str = "run_meta.json";

/// Default fence pattern for chat transcripts; capture group 1 is the command.
pub const DEFAULT_COMMAND_PATTERN: &str = r"```bash\s*\n([\s\S]*?)\n?```";

/// What an artifact inside a run directory is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactRole {
    Steps,
    Task,
    Config,
    Logs,
}

/// Discovered layout of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    /// Role → path relative to the run directory.
    pub artifacts: BTreeMap<ArtifactRole, PathBuf>,
    /// Format fingerprint of the step-bearing artifact.
    pub format_fingerprint: String,
}

impl LayoutSpec {
    /// Relative path of the step-bearing artifact (always present).
    pub fn steps_path(&self) -> &Path {
        self.artifacts.get(&ArtifactRole::Steps).expect("layout always has a steps artifact")
    }
}

/// Key mapping for the step-array dialect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepArrayMap {
    pub action_key: String,
    pub observation_key: String,
    pub content_key: String,
    pub thought_key: String,
    pub returncode_key: String,
    pub token_usage_key: String,
}

impl Default for StepArrayMap {
    fn default() -> Self {
        StepArrayMap {
            action_key: "action_ref".into(),
            observation_key: "observation_ref".into(),
            content_key: "content".into(),
            thought_key: "thought".into(),
            returncode_key: "returncode".into(),
            token_usage_key: "token_usage".into(),
        }
    }
}

/// Key mapping for the chat-transcript dialect (JSONL records).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatMap {
    pub role_key: String,
    pub content_key: String,
    pub agent_role: String,
    pub env_role: String,
    pub returncode_key: String,
    /// Regex whose first capture group extracts the command from an agent
    /// message; messages without a match are thought-only.
    pub command_pattern: String,
}

impl Default for ChatMap {
    fn default() -> Self {
        ChatMap {
            role_key: "role".into(),
            content_key: "content".into(),
            agent_role: "assistant".into(),
            env_role: "user".into(),
            returncode_key: "returncode".into(),
            command_pattern: DEFAULT_COMMAND_PATTERN.into(),
        }
    }
}

/// Declarative field-mapping rules for one source format. Descriptors are
/// data, not code: new formats are added by registering a descriptor, never
/// by generating a parser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dialect", rename_all = "snake_case")]
pub enum Dialect {
    StepArray(StepArrayMap),
    ChatTranscript(ChatMap),
}

/// Named, versioned field-mapping descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserDescriptor {
    pub name: String,
    pub version: String,
    #[serde(flatten)]
    pub rules: Dialect,
}

/// Fingerprint → descriptor table, persisted as `parser_registry.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParserRegistry {
    pub parsers: BTreeMap<String, ParserDescriptor>,
}

// Embedded probe fixtures: the built-in registry fingerprints these at
// startup so the digests always agree with the live fingerprint function.
const STEP_ARRAY_PROBES: [&str; 4] = [
    r#"[{"step_id":1,"action_ref":{"content":"ls"},"observation_ref":{"content":"src","returncode":0}}]"#,
    r#"[{"step_id":1,"action_ref":{"content":"ls","thought":"look"},"observation_ref":{"content":"src","returncode":0}}]"#,
    r#"[{"step_id":1,"action_ref":{"content":"ls"},"observation_ref":{"content":"src","returncode":0},"token_usage":10}]"#,
    r#"[{"step_id":1,"action_ref":{"content":"ls","thought":"look"},"observation_ref":{"content":"src","returncode":0},"token_usage":10}]"#,
];

const CHAT_PROBES: [&str; 2] = [
    "{\"role\":\"assistant\",\"content\":\"x\"}\n{\"role\":\"user\",\"content\":\"y\",\"returncode\":0}\n",
    "{\"role\":\"assistant\",\"content\":\"x\"}\n{\"role\":\"user\",\"content\":\"y\"}\n",
];

impl ParserRegistry {
    /// Registry pre-loaded with the two built-in dialect descriptors,
    /// registered under the fingerprints of their schema variants.
    pub fn builtin() -> Self {
        let mut registry = ParserRegistry::default();
        let step_array = ParserDescriptor {
            name: "step_array".into(),
            version: "1".into(),
            rules: Dialect::StepArray(StepArrayMap::default()),
        };
        for probe in STEP_ARRAY_PROBES {
            let value: serde_json::Value = serde_json::from_str(probe).expect("probe is valid JSON");
            registry.parsers.insert(fingerprint_value(&value), step_array.clone());
        }
        let chat = ParserDescriptor {
            name: "chat_transcript".into(),
            version: "1".into(),
            rules: Dialect::ChatTranscript(ChatMap::default()),
        };
        for probe in CHAT_PROBES {
            let value = jsonl_to_value(probe).expect("probe is valid JSONL");
            registry.parsers.insert(fingerprint_value(&value), chat.clone());
        }
        registry
    }

    /// Registration hook for externally authored descriptors.
    pub fn register(&mut self, fingerprint: impl Into<String>, descriptor: ParserDescriptor) {
        self.parsers.insert(fingerprint.into(), descriptor);
    }

    /// Exact-fingerprint lookup; `None` means the format must be registered.
    pub fn select(&self, fingerprint: &str) -> Option<&ParserDescriptor> {
        self.parsers.get(fingerprint)
    }

    /// Merge descriptors from a persisted registry file over this one.
    pub fn merge_from_file(&mut self, path: &Path) -> Result<(), ExtractError> {
        let text = fs::read_to_string(path).map_err(|e| ExtractError::io(path, e))?;
        let loaded: ParserRegistry = serde_json::from_str(&text)
            .map_err(|e| ExtractError::MalformedArtifact { path: path.into(), offset: byte_offset(&text, &e) })?;
        self.parsers.extend(loaded.parsers);
        Ok(())
    }

    /// Persist the registry as pretty JSON.
    pub fn save(&self, path: &Path) -> Result<(), ExtractError> {
        let mut text = serde_json::to_string_pretty(self).expect("registry always serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| ExtractError::io(path, e))
    }
}

/// Extraction failure modes.
#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("no step-bearing artifact found in {dir}")]
    NoStepArtifact { dir: PathBuf },
    #[error("{path}: unparseable content at byte offset {offset}")]
    MalformedArtifact { path: PathBuf, offset: usize },
    #[error("no registered parser for format fingerprint {fingerprint}; register a descriptor for it")]
    UnknownFormat { fingerprint: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ExtractError {
    fn io(path: &Path, source: io::Error) -> Self {
        ExtractError::Io { path: path.into(), source }
    }
}

fn byte_offset(text: &str, err: &serde_json::Error) -> usize {
    let line = err.line().max(1);
    let column = err.column().max(1);
    let mut offset = 0usize;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + (column - 1).min(l.len());
        }
        offset += l.len() + 1;
    }
    offset.min(text.len())
}

fn collect_key_paths(value: &serde_json::Value, prefix: &str, depth: usize, acc: &mut BTreeSet<String>) {
    const MAX_DEPTH: usize = 3;
    match value {
        serde_json::Value::Object(map) => {
            for (key, child) in map {
                if depth + 1 > MAX_DEPTH {
                    continue;
                }
                let path = format!("{prefix}.{key}");
                acc.insert(path.clone());
                collect_key_paths(child, &path, depth + 1, acc);
            }
        }
        serde_json::Value::Array(items) => {
            let path = format!("{prefix}[]");
            for item in items {
                collect_key_paths(item, &path, depth, acc);
            }
        }
        _ => {}
    }
}

/// Fingerprint of a parsed step-bearing document.
pub fn fingerprint_value(value: &serde_json::Value) -> String {
    let mut paths = BTreeSet::new();
    collect_key_paths(value, "$", 0, &mut paths);
    let joined = paths.into_iter().collect::<Vec<_>>().join("\n");
    let digest = Sha256::digest(joined.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Parse JSONL into a JSON array value, tolerating a truncated final line
/// (streamed dumps are cut mid-record when generation stops early).
fn jsonl_to_value(text: &str) -> Option<serde_json::Value> {
    let mut items = Vec::new();
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<serde_json::Value>(line) {
            Ok(v) => items.push(v),
            Err(_) if i + 1 == lines.len() => continue,
            Err(_) => return None,
        }
    }
    if items.is_empty() {
        None
    } else {
        Some(serde_json::Value::Array(items))
    }
}

/// Fingerprint the step-bearing artifact at `path`.
pub fn fingerprint_file(path: &Path) -> Result<String, ExtractError> {
    let text = fs::read_to_string(path).map_err(|e| ExtractError::io(path, e))?;
    let value = parse_step_document(path, &text)?;
    Ok(fingerprint_value(&value))
}

fn parse_step_document(path: &Path, text: &str) -> Result<serde_json::Value, ExtractError> {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(text) {
        return Ok(v);
    }
    jsonl_to_value(text).ok_or_else(|| {
        let err = serde_json::from_str::<serde_json::Value>(text).unwrap_err();
        ExtractError::MalformedArtifact { path: path.into(), offset: byte_offset(text, &err) }
    })
}

const SIDECAR_NAMES: [&str; 9] = [
    RUN_META_FILENAME,
    RUN_FLAGS_FILENAME,
    "gold_labels.json",
    "stage_ranges.json",
    "mini_tracer_labels.json",
    "parser_registry.json",
    "trace_report.json",
    "report.json",
    "replay_budget.json",
];

fn looks_like_step_document(value: &serde_json::Value) -> bool {
    let serde_json::Value::Array(items) = value else { return false };
    if items.is_empty() {
        return false;
    }
    let objects = items.iter().filter_map(|i| i.as_object()).count();
    if objects == 0 {
        return false;
    }
    let with_action = items
        .iter()
        .filter_map(|i| i.as_object())
        .filter(|o| {
            o.contains_key("action_ref") || o.contains_key("action") || o.contains_key("command")
        })
        .count();
    let with_role = items
        .iter()
        .filter_map(|i| i.as_object())
        .filter(|o| o.get("role").is_some_and(|r| r.is_string()) && o.contains_key("content"))
        .count();
    with_action * 2 >= objects || with_role * 2 >= objects
}

/// Scan a run directory, pick the step-bearing artifact by structural
/// probing, assign the optional task/config/logs roles, and fingerprint the
/// step artifact. Fails with [`ExtractError::NoStepArtifact`] when nothing
/// holds an ordered action sequence.
pub fn discover_layout(run_dir: &Path) -> Result<LayoutSpec, ExtractError> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(run_dir).max_depth(2).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(_) => continue,
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        let ext_ok = name.ends_with(".json") || name.ends_with(".jsonl");
        if ext_ok && !SIDECAR_NAMES.contains(&name.as_str()) {
            candidates.push(entry.into_path());
        }
    }
    // A file literally named steps.json wins; otherwise first (sorted) match.
    candidates.sort_by_key(|p| {
        let named_steps = p.file_name().is_some_and(|n| n == "steps.json");
        (!named_steps, p.clone())
    });

    let mut steps_artifact = None;
    let mut first_parse_error = None;
    for candidate in &candidates {
        let Ok(text) = fs::read_to_string(candidate) else { continue };
        match parse_step_document(candidate, &text) {
            Ok(value) if looks_like_step_document(&value) => {
                steps_artifact = Some((candidate.clone(), fingerprint_value(&value)));
                break;
            }
            Ok(_) => {}
            Err(e) => {
                first_parse_error.get_or_insert(e);
            }
        }
    }
    let Some((steps_path, fingerprint)) = steps_artifact else {
        // A broken artifact is more actionable than "nothing found".
        return Err(match first_parse_error {
            Some(e) => e,
            None => ExtractError::NoStepArtifact { dir: run_dir.into() },
        });
    };

    let mut artifacts = BTreeMap::new();
    let rel = steps_path.strip_prefix(run_dir).unwrap_or(&steps_path).to_path_buf();
    artifacts.insert(ArtifactRole::Steps, rel);
    for task_name in ["task.md", "task.txt", "issue.md", "problem.md"] {
        if run_dir.join(task_name).is_file() {
            artifacts.insert(ArtifactRole::Task, PathBuf::from(task_name));
            break;
        }
    }
    for config_name in ["config.json", "config.yaml", "config.toml", "settings.json"] {
        if run_dir.join(config_name).is_file()
            && artifacts.get(&ArtifactRole::Steps).is_none_or(|s| s != Path::new(config_name))
        {
            artifacts.insert(ArtifactRole::Config, PathBuf::from(config_name));
            break;
        }
    }
    if let Some(log) = WalkDir::new(run_dir)
        .max_depth(2)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .find(|e| e.file_type().is_file() && e.file_name().to_string_lossy().ends_with(".log"))
    {
        let rel = log.path().strip_prefix(run_dir).unwrap_or(log.path()).to_path_buf();
        artifacts.insert(ArtifactRole::Logs, rel);
    }
    Ok(LayoutSpec { artifacts, format_fingerprint: fingerprint })
}

/// Optional metadata sidecar carried by canonical run directories.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunMeta {
    pub task_id: Option<String>,
    pub framework_id: Option<String>,
    pub backbone_id: Option<String>,
    pub outcome: Option<Outcome>,
    pub run_flags: BTreeSet<RunFlag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_tokens: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl RunMeta {
    /// Metadata snapshot of a trajectory. The env-corrupt flag is excluded:
    /// its only legitimate carrier is the `run_flags.json` sidecar.
    pub fn from_trajectory(t: &Trajectory) -> Self {
        RunMeta {
            task_id: Some(t.task_id.clone()),
            framework_id: Some(t.framework_id.clone()),
            backbone_id: Some(t.backbone_id.clone()),
            outcome: Some(t.outcome),
            run_flags: t
                .run_flags
                .iter()
                .copied()
                .filter(|f| *f != RunFlag::EnvCorrupt)
                .collect(),
            total_tokens: t.total_tokens,
            difficulty: None,
            category: None,
        }
    }
}

/// Read `run_meta.json` if present.
pub fn read_run_meta(run_dir: &Path) -> Result<Option<RunMeta>, ExtractError> {
    let path = run_dir.join(RUN_META_FILENAME);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| ExtractError::io(&path, e))?;
    let meta = serde_json::from_str(&text).map_err(|e| ExtractError::MalformedArtifact {
        path: path.clone(),
        offset: byte_offset(&text, &e),
    })?;
    Ok(Some(meta))
}

#[derive(Debug, Default, Deserialize)]
struct SidecarFlags {
    #[serde(default)]
    env_corrupt: bool,
}

/// Read the env-corrupt sidecar; absence means not corrupt.
pub fn read_env_corrupt_sidecar(run_dir: &Path) -> Result<bool, ExtractError> {
    let path = run_dir.join(RUN_FLAGS_FILENAME);
    if !path.is_file() {
        return Ok(false);
    }
    let text = fs::read_to_string(&path).map_err(|e| ExtractError::io(&path, e))?;
    let flags: SidecarFlags = serde_json::from_str(&text).map_err(|e| {
        ExtractError::MalformedArtifact { path: path.clone(), offset: byte_offset(&text, &e) }
    })?;
    Ok(flags.env_corrupt)
}

fn string_at<'v>(obj: &'v serde_json::Map<String, serde_json::Value>, key: &str) -> Option<&'v str> {
    obj.get(key).and_then(|v| v.as_str())
}

fn normalize_step_array(
    path: &Path,
    text: &str,
    map: &StepArrayMap,
) -> Result<Vec<StepRecord>, ExtractError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
        ExtractError::MalformedArtifact { path: path.into(), offset: byte_offset(text, &e) }
    })?;
    let Some(items) = value.as_array() else {
        return Err(ExtractError::MalformedArtifact { path: path.into(), offset: 0 });
    };

    let mut steps: Vec<StepRecord> = Vec::with_capacity(items.len());
    let mut pending_thought: Vec<String> = Vec::new();
    let mut pending_for_next: Vec<String> = Vec::new();
    for item in items {
        let Some(obj) = item.as_object() else { continue };
        let (content, mut thought, action_extra) = match obj.get(&map.action_key) {
            Some(serde_json::Value::String(s)) => (s.clone(), None, Default::default()),
            Some(serde_json::Value::Object(action)) => {
                let content = string_at(action, &map.content_key).unwrap_or("").to_string();
                let thought = string_at(action, &map.thought_key).map(str::to_string);
                let extra: serde_json::Map<String, serde_json::Value> = action
                    .iter()
                    .filter(|(k, _)| **k != map.content_key && **k != map.thought_key)
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                (content, thought, extra)
            }
            _ => (String::new(), None, Default::default()),
        };

        if content.trim().is_empty() {
            // Commandless record: its text folds into the next step's thought.
            if let Some(th) = thought {
                pending_for_next.push(th);
            }
            continue;
        }

        pending_thought.append(&mut pending_for_next);
        if let Some(th) = thought.take() {
            pending_thought.push(th);
        }
        let folded =
            if pending_thought.is_empty() { None } else { Some(pending_thought.join("\n")) };
        pending_thought.clear();

        let observation = match obj.get(&map.observation_key) {
            Some(serde_json::Value::String(s)) => Some(ObservationRecord {
                content: s.clone(),
                returncode: None,
                extra: Default::default(),
            }),
            Some(serde_json::Value::Object(observed)) => {
                let extra: serde_json::Map<String, serde_json::Value> = observed
                    .iter()
                    .filter(|(k, _)| **k != map.content_key && **k != map.returncode_key)
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                Some(ObservationRecord {
                    content: string_at(observed, &map.content_key).unwrap_or("").to_string(),
                    returncode: observed
                        .get(&map.returncode_key)
                        .and_then(|v| v.as_i64())
                        .map(|v| v as i32),
                    extra,
                })
            }
            _ => None,
        };

        steps.push(StepRecord {
            step_id: steps.len() as u32 + 1,
            action: ActionRecord { content, thought: folded, extra: action_extra },
            observation,
            token_usage: obj.get(&map.token_usage_key).and_then(|v| v.as_u64()),
        });
    }
    Ok(steps)
}

struct ChatNormalization {
    steps: Vec<StepRecord>,
    truncated_tail: bool,
}

fn normalize_chat_transcript(
    path: &Path,
    text: &str,
    map: &ChatMap,
) -> Result<ChatNormalization, ExtractError> {
    let pattern = Regex::new(&map.command_pattern).map_err(|_| ExtractError::MalformedArtifact {
        path: path.into(),
        offset: 0,
    })?;
    let lines: Vec<(usize, &str)> = {
        let mut offset = 0usize;
        let mut out = Vec::new();
        for line in text.split('\n') {
            if !line.trim().is_empty() {
                out.push((offset, line));
            }
            offset += line.len() + 1;
        }
        out
    };

    let mut steps: Vec<StepRecord> = Vec::new();
    let mut pending_thought: Vec<String> = Vec::new();
    let mut awaiting_observation = false;
    let mut truncated_tail = false;

    for (i, (offset, line)) in lines.iter().enumerate() {
        let record: serde_json::Map<String, serde_json::Value> =
            match serde_json::from_str(line) {
                Ok(serde_json::Value::Object(map)) => map,
                Ok(_) | Err(_) if i + 1 == lines.len() => {
                    // Dangling unterminated final record: the dump stopped
                    // mid-generation. Drop the partial record and flag it.
                    truncated_tail = true;
                    continue;
                }
                _ => {
                    return Err(ExtractError::MalformedArtifact {
                        path: path.into(),
                        offset: *offset,
                    })
                }
            };
        let role = string_at(&record, &map.role_key).unwrap_or("");
        let content = string_at(&record, &map.content_key).unwrap_or("").to_string();
        if role == map.agent_role {
            match pattern.captures(&content) {
                Some(caps) => {
                    let command = caps.get(1).map(|m| m.as_str()).unwrap_or("").to_string();
                    let before = content[..caps.get(0).unwrap().start()].trim().to_string();
                    if !before.is_empty() {
                        pending_thought.push(before);
                    }
                    let thought = if pending_thought.is_empty() {
                        None
                    } else {
                        Some(pending_thought.join("\n"))
                    };
                    pending_thought.clear();
                    steps.push(StepRecord {
                        step_id: steps.len() as u32 + 1,
                        action: ActionRecord {
                            content: command,
                            thought,
                            extra: Default::default(),
                        },
                        observation: None,
                        token_usage: record.get("token_usage").and_then(|v| v.as_u64()),
                    });
                    awaiting_observation = true;
                }
                None => pending_thought.push(content),
            }
        } else if role == map.env_role {
            let returncode =
                record.get(&map.returncode_key).and_then(|v| v.as_i64()).map(|v| v as i32);
            match steps.last_mut() {
                Some(last) if awaiting_observation => {
                    last.observation = Some(ObservationRecord {
                        content,
                        returncode,
                        extra: Default::default(),
                    });
                    awaiting_observation = false;
                }
                Some(last) => {
                    // Continuation of a split output: append to the last step.
                    if let Some(obs) = last.observation.as_mut() {
                        obs.content.push('\n');
                        obs.content.push_str(&content);
                    }
                }
                None => {} // preamble before any command; nothing to attach to
            }
        }
        // Records with other roles (system banners etc.) are ignored.
    }
    Ok(ChatNormalization { steps, truncated_tail })
}

/// Normalize a run directory into a [`Trajectory`] using the given
/// descriptor: one step per executed command, contiguously re-indexed from
/// 1, with commandless agent messages folded into the next step's thought,
/// run flags set from explicit markers, and metadata pulled from the
/// optional sidecars.
pub fn parse_and_normalize(
    run_dir: &Path,
    descriptor: &ParserDescriptor,
) -> Result<Trajectory, ExtractError> {
    let layout = discover_layout(run_dir)?;
    let steps_path = run_dir.join(layout.steps_path());
    let text = fs::read_to_string(&steps_path).map_err(|e| ExtractError::io(&steps_path, e))?;

    let mut run_flags: BTreeSet<RunFlag> = BTreeSet::new();
    let steps = match &descriptor.rules {
        Dialect::StepArray(map) => normalize_step_array(&steps_path, &text, map)?,
        Dialect::ChatTranscript(map) => {
            let normalized = normalize_chat_transcript(&steps_path, &text, map)?;
            if normalized.truncated_tail {
                run_flags.insert(RunFlag::TruncatedGeneration);
            }
            normalized.steps
        }
    };

    let meta = read_run_meta(run_dir)?.unwrap_or_default();
    for flag in &meta.run_flags {
        // The metadata sidecar may carry explicit timeout/truncation
        // markers; env corruption is only believed from run_flags.json.
        if *flag != RunFlag::EnvCorrupt {
            run_flags.insert(*flag);
        }
    }
    if read_env_corrupt_sidecar(run_dir)? {
        run_flags.insert(RunFlag::EnvCorrupt);
    }

    Ok(Trajectory {
        task_id: meta.task_id.unwrap_or_else(|| "unknown".into()),
        framework_id: meta.framework_id.unwrap_or_else(|| "unknown".into()),
        backbone_id: meta.backbone_id.unwrap_or_else(|| "unknown".into()),
        outcome: meta.outcome.unwrap_or(Outcome::Unknown),
        run_flags,
        total_tokens: meta.total_tokens,
        steps,
    })
}

/// Discover, fingerprint, select a parser, and normalize in one call.
pub fn extract_run(
    run_dir: &Path,
    registry: &ParserRegistry,
) -> Result<(LayoutSpec, Trajectory), ExtractError> {
    let layout = discover_layout(run_dir)?;
    let descriptor = registry.select(&layout.format_fingerprint).ok_or_else(|| {
        ExtractError::UnknownFormat { fingerprint: layout.format_fingerprint.clone() }
    })?;
    let trajectory = parse_and_normalize(run_dir, descriptor)?;
    Ok((layout, trajectory))
}

/// Write a trajectory as a canonical run directory: `steps.json` plus the
/// metadata sidecar (and the env-corrupt sidecar when that flag is set).
pub fn write_run_dir(dir: &Path, t: &Trajectory, meta: &RunMeta) -> Result<(), ExtractError> {
    fs::create_dir_all(dir).map_err(|e| ExtractError::io(dir, e))?;
    let steps_path = dir.join("steps.json");
    fs::write(&steps_path, crate::model::steps_to_json(&t.steps))
        .map_err(|e| ExtractError::io(&steps_path, e))?;
    let meta_path = dir.join(RUN_META_FILENAME);
    let mut meta_text = serde_json::to_string_pretty(meta).expect("meta always serializes");
    meta_text.push('\n');
    fs::write(&meta_path, meta_text).map_err(|e| ExtractError::io(&meta_path, e))?;
    if t.run_flags.contains(&RunFlag::EnvCorrupt) {
        let sidecar = dir.join(RUN_FLAGS_FILENAME);
        fs::write(&sidecar, "{\n  \"env_corrupt\": true\n}\n")
            .map_err(|e| ExtractError::io(&sidecar, e))?;
    }
    Ok(())
}

/// Why a run was dropped from the analysis corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Timeout,
    TruncatedGeneration,
    EnvCorrupt,
    ShortCorrect,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::Timeout => "timeout",
            RejectReason::TruncatedGeneration => "truncated_generation",
            RejectReason::EnvCorrupt => "env_corrupt",
            RejectReason::ShortCorrect => "short_correct",
        };
        f.write_str(s)
    }
}

/// Corpus filter decision for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum FilterVerdict {
    Retained,
    Rejected { reason: RejectReason },
}

impl FilterVerdict {
    pub fn is_retained(&self) -> bool {
        matches!(self, FilterVerdict::Retained)
    }
}

/// Apply the four corpus filters. Order fixes the reported reason when
/// several apply: timeout, then truncated generation, then corrupt
/// environment, then trivially-short solved runs.
pub fn apply_filters(t: &Trajectory) -> FilterVerdict {
    if t.run_flags.contains(&RunFlag::TimedOut) {
        return FilterVerdict::Rejected { reason: RejectReason::Timeout };
    }
    if t.run_flags.contains(&RunFlag::TruncatedGeneration) {
        return FilterVerdict::Rejected { reason: RejectReason::TruncatedGeneration };
    }
    if t.run_flags.contains(&RunFlag::EnvCorrupt) {
        return FilterVerdict::Rejected { reason: RejectReason::EnvCorrupt };
    }
    if t.outcome == Outcome::Solved && t.steps.len() < SHORT_CORRECT_MAX_STEPS {
        return FilterVerdict::Rejected { reason: RejectReason::ShortCorrect };
    }
    FilterVerdict::Retained
}
