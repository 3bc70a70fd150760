//! Emulated execution environment for diagnosis sessions.
//!
//! Nothing is ever run in a shell: the step log is served from memory, and
//! label writes are applied by extracting the JSON payload out of the
//! command text and validating it against the labels schema. Invalid
//! payloads are rejected with a non-zero status and leave the label state
//! untouched, exactly like a real interpreter refusing bad input.

use std::collections::BTreeSet;

use crate::model::{StageDiagnosis, StepRecord};

use super::CommandClass;

/// Outcome of executing one command in the emulated environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionRecord {
    pub returncode: i32,
    pub output: String,
}

impl ExecutionRecord {
    fn ok(output: impl Into<String>) -> Self {
        ExecutionRecord { returncode: 0, output: output.into() }
    }

    fn err(output: impl Into<String>) -> Self {
        ExecutionRecord { returncode: 1, output: output.into() }
    }
}

/// In-memory stand-in for the analysis working directory: the read-only
/// step log plus the mutable labels file, with inspection bookkeeping.
#[derive(Debug, Clone)]
pub struct EmulatedSandbox {
    steps: Vec<StepRecord>,
    pub labels: Vec<StageDiagnosis>,
    pub inspected: BTreeSet<u32>,
}

impl EmulatedSandbox {
    pub fn new(steps: &[StepRecord]) -> Self {
        EmulatedSandbox { steps: steps.to_vec(), labels: Vec::new(), inspected: BTreeSet::new() }
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// Execute a classified command. Forbidden and finalize commands never
    /// reach the sandbox; the session loop handles them.
    pub fn execute(&mut self, class: &CommandClass, command: &str) -> ExecutionRecord {
        match class {
            CommandClass::InitWrite => {
                self.labels.clear();
                ExecutionRecord::ok("")
            }
            CommandClass::Inspect { index } => self.inspect(*index),
            CommandClass::Write => self.write(command),
            CommandClass::Finalize | CommandClass::Forbidden { .. } => {
                ExecutionRecord::err("command is not executable in this environment")
            }
        }
    }

    fn inspect(&mut self, index: i64) -> ExecutionRecord {
        let len = self.steps.len() as i64;
        let position = if index < 0 { len + index } else { index };
        if position < 0 || position >= len {
            return ExecutionRecord::err(
                "Traceback (most recent call last):\nIndexError: list index out of range",
            );
        }
        let step = &self.steps[position as usize];
        self.inspected.insert(step.step_id);
        let rendered =
            serde_json::to_string_pretty(step).expect("step records always serialize");
        ExecutionRecord::ok(rendered)
    }

    fn write(&mut self, command: &str) -> ExecutionRecord {
        // Commands may carry the payload either directly (single-quoted -c
        // argument) or with shell-escaped double quotes; try both readings.
        let unescaped = command.replace("\\\"", "\"");
        let mut candidates = vec![command];
        if unescaped != command {
            candidates.push(&unescaped);
        }

        let mut last_error: Option<String> = None;
        for cand in &candidates {
            if let Some(payload) = extract_appended_object(cand) {
                match serde_json::from_str::<StageDiagnosis>(payload) {
                    Ok(label) => {
                        self.labels.push(label);
                        return ExecutionRecord::ok("");
                    }
                    Err(e) => last_error = Some(format!(
                        "label rejected: {e}; append a double-quoted JSON object with keys \
                         stage_id, incorrect_step_ids, unuseful_step_ids, reasoning"
                    )),
                }
            }
        }
        if let Some(msg) = last_error {
            return ExecutionRecord::err(msg);
        }
        for cand in &candidates {
            if let Some(payload) = extract_dumped_array(cand) {
                match serde_json::from_str::<Vec<StageDiagnosis>>(payload) {
                    Ok(labels) => {
                        self.labels = labels;
                        return ExecutionRecord::ok("");
                    }
                    Err(e) => last_error = Some(format!("labels rejected: {e}")),
                }
            }
        }
        match last_error {
            Some(msg) => ExecutionRecord::err(msg),
            None => ExecutionRecord::err("could not locate a JSON payload in the write command"),
        }
    }
}

/// Slice of `text` spanning one balanced `open`..`close` group starting at
/// or after `from`, honoring single/double quoted strings and escapes.
fn balanced_slice(text: &str, from: usize, open: char, close: char) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text[from..].find(open)? + from;
    let mut depth = 0usize;
    let mut in_string: Option<u8> = None;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
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
        } else if b == open as u8 {
            depth += 1;
        } else if b == close as u8 {
            depth -= 1;
            if depth == 0 {
                return Some(&text[start..=i]);
            }
        }
    }
    None
}

/// Payload of a `.append({...})` call, when present.
pub fn extract_appended_object(command: &str) -> Option<&str> {
    let at = command.find(".append(")?;
    balanced_slice(command, at + ".append(".len(), '{', '}')
}

/// First `[...]` argument of a `json.dump(` call, when present.
pub fn extract_dumped_array(command: &str) -> Option<&str> {
    let at = command.find("json.dump(")?;
    let open_paren = at + "json.dump".len();
    let arg_start = command[open_paren..].find('[')? + open_paren;
    // The array must be the first argument, not buried in a later one.
    let between = &command[open_paren + 1..arg_start];
    if between.trim().is_empty() {
        balanced_slice(command, arg_start, '[', ']')
    } else {
        None
    }
}
