//! Deterministic decision tables over shell commands: explore-vs-change
//! classification, stage attribution, test-run recognition, and path-target
//! extraction. Everything here is a pure function of the command text (plus,
//! for stages, whether a patching step happened earlier), so classifications
//! are reproducible across runs and platforms.
//!
//! Table policy, in evaluation order:
//! - recognized test executions are exploration, even when they redirect;
//! - an unquoted redirect to anything but `/dev/null` or an fd dup mutates;
//! - known mutating heads (editors, file ops, installs, version-control
//!   mutations, service restarts, `sed -i`) mutate;
//! - everything else — including unknown commands — is exploration.

use std::collections::BTreeSet;

use crate::model::{StageLabel, StepKind};

/// Wrapper tokens skipped before the head token is read.
const WRAPPERS: [&str; 3] = ["sudo", "time", "nohup"];

/// Heads that always mutate the workspace or environment.
const MUTATING_HEADS: [&str; 20] = [
    "vi", "vim", "nvim", "nano", "emacs", "ed", "tee", "touch", "mkdir", "rmdir", "rm", "mv",
    "cp", "ln", "chmod", "chown", "patch", "truncate", "dd", "install",
];

/// Heads that only read state (the redirect rule still overrides).
const READ_ONLY_HEADS: [&str; 30] = [
    "ls", "cat", "head", "tail", "less", "more", "grep", "rg", "find", "fd", "tree", "pwd",
    "which", "whereis", "file", "stat", "du", "df", "wc", "echo", "ps", "top", "whoami", "id",
    "date", "man", "type", "diff", "cmp", "history",
];

/// Heads whose presence alone marks an environment probe.
const PROBE_HEADS: [&str; 9] =
    ["uname", "env", "printenv", "whoami", "hostname", "lsb_release", "which", "whereis", "type"];

/// Package managers with mutating/query sub-command tables.
const PACKAGE_MANAGERS: [&str; 16] = [
    "pip", "pip2", "pip3", "pipenv", "poetry", "conda", "mamba", "npm", "yarn", "pnpm", "apt",
    "apt-get", "yum", "dnf", "apk", "brew",
];

/// First token of the command after shell wrappers and environment
/// assignments, with any directory prefix stripped.
pub fn head_token(command: &str) -> Option<&str> {
    let mut tokens = command.split_whitespace();
    for tok in tokens.by_ref() {
        if is_env_assignment(tok) || WRAPPERS.contains(&tok) {
            continue;
        }
        return Some(tok.rsplit('/').next().unwrap_or(tok));
    }
    None
}

fn is_env_assignment(token: &str) -> bool {
    match token.split_once('=') {
        Some((name, _)) => {
            !name.is_empty()
                && name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        }
        None => false,
    }
}

/// Second token (first argument), used for sub-command tables.
fn sub_command(command: &str) -> Option<&str> {
    let mut tokens = command.split_whitespace();
    tokens.find(|tok| !is_env_assignment(tok) && !WRAPPERS.contains(tok))?;
    tokens.next()
}

fn has_flag(command: &str, flag: &str) -> bool {
    command.split_whitespace().any(|tok| tok == flag)
}

/// True for an unquoted `>`/`>>` that writes a real file (fd dups and
/// `/dev/null` sinks don't count as mutations).
pub fn has_mutating_redirect(command: &str) -> bool {
    let bytes = command.as_bytes();
    let mut in_single = false;
    let mut in_double = false;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            '\'' if !in_double => in_single = !in_single,
            '"' if !in_single => in_double = !in_double,
            '>' if !in_single && !in_double => {
                let mut j = i + 1;
                if j < bytes.len() && bytes[j] as char == '>' {
                    j += 1;
                }
                // Skip whitespace to find the redirect target.
                while j < bytes.len() && (bytes[j] as char).is_whitespace() {
                    j += 1;
                }
                let rest = &command[j..];
                let target: String =
                    rest.chars().take_while(|ch| !ch.is_whitespace()).collect();
                let is_fd_dup = target.starts_with('&');
                if !is_fd_dup && target != "/dev/null" && !target.is_empty() {
                    return true;
                }
                i = j;
                continue;
            }
            _ => {}
        }
        i += 1;
    }
    false
}

/// True for recognized test executions (pytest/unittest/cargo test/etc.).
pub fn is_test_command(command: &str) -> bool {
    let Some(head) = head_token(command) else { return false };
    match head {
        "pytest" | "tox" | "jest" | "mocha" | "ctest" | "rspec" | "phpunit" => true,
        "python" | "python2" | "python3" => command
            .split_whitespace()
            .skip_while(|t| *t != "-m")
            .nth(1)
            .is_some_and(|m| m == "pytest" || m == "unittest"),
        "cargo" | "go" | "npm" | "yarn" | "pnpm" | "make" => {
            matches!(sub_command(command), Some("test") | Some("check"))
                && !(head == "cargo" && sub_command(command) == Some("check"))
        }
        _ => false,
    }
}

fn git_mutates(sub: Option<&str>) -> bool {
    matches!(
        sub,
        Some(
            "add" | "commit" | "push" | "pull" | "fetch" | "checkout" | "switch" | "restore"
                | "reset" | "revert" | "merge" | "rebase" | "cherry-pick" | "stash" | "apply"
                | "am" | "clone" | "init" | "rm" | "mv" | "tag"
        )
    )
}

fn package_manager_mutates(sub: Option<&str>) -> bool {
    matches!(
        sub,
        Some(
            "install" | "uninstall" | "remove" | "purge" | "add" | "upgrade" | "update"
                | "create" | "ci" | "sync"
        )
    )
}

/// Explore/Change decision table. Test executions and unknown commands both
/// resolve to Explore; mutations require positive evidence.
pub fn classify_kind(command: &str) -> StepKind {
    let Some(head) = head_token(command) else { return StepKind::Explore };
    if is_test_command(command) {
        return StepKind::Explore;
    }
    if has_mutating_redirect(command) {
        return StepKind::Change;
    }
    if MUTATING_HEADS.contains(&head) {
        return StepKind::Change;
    }
    match head {
        "sed" | "awk" | "perl" => {
            if has_flag(command, "-i") || command.split_whitespace().any(|t| t.starts_with("-i")) {
                StepKind::Change
            } else {
                StepKind::Explore
            }
        }
        "git" => {
            if git_mutates(sub_command(command)) {
                StepKind::Change
            } else {
                StepKind::Explore
            }
        }
        "cargo" => match sub_command(command) {
            Some("add" | "install" | "remove" | "update" | "build" | "new" | "init") => {
                StepKind::Change
            }
            _ => StepKind::Explore,
        },
        "go" => match sub_command(command) {
            Some("get" | "install" | "mod") => StepKind::Change,
            _ => StepKind::Explore,
        },
        "gem" => {
            if package_manager_mutates(sub_command(command)) {
                StepKind::Change
            } else {
                StepKind::Explore
            }
        }
        "systemctl" | "service" => match sub_command(command) {
            Some("start" | "stop" | "restart" | "reload" | "enable" | "disable") => StepKind::Change,
            _ => StepKind::Explore,
        },
        "tar" => {
            // Extraction/creation writes; listing reads.
            let args = sub_command(command).unwrap_or("");
            if args.contains('x') || args.contains('c') {
                StepKind::Change
            } else {
                StepKind::Explore
            }
        }
        "unzip" | "gunzip" | "wget" => StepKind::Change,
        "curl" => {
            if has_flag(command, "-o") || has_flag(command, "-O") {
                StepKind::Change
            } else {
                StepKind::Explore
            }
        }
        "export" | "unset" => StepKind::Change,
        _ if PACKAGE_MANAGERS.contains(&head) => {
            if package_manager_mutates(sub_command(command)) {
                StepKind::Change
            } else {
                StepKind::Explore
            }
        }
        _ if READ_ONLY_HEADS.contains(&head) => StepKind::Explore,
        // Unknown commands default to exploration.
        _ => StepKind::Explore,
    }
}

/// True for a package-manager invocation that installs/removes dependencies.
pub fn is_dependency_command(command: &str) -> bool {
    let Some(head) = head_token(command) else { return false };
    let sub = sub_command(command);
    if PACKAGE_MANAGERS.contains(&head) || head == "gem" {
        return package_manager_mutates(sub);
    }
    matches!((head, sub), ("cargo", Some("add" | "install")) | ("go", Some("get" | "install")))
}

/// True for environment/toolchain probes (`--version`, `which`, `uname`,
/// package-manager queries, ...).
pub fn is_environment_probe(command: &str) -> bool {
    let Some(head) = head_token(command) else { return false };
    if PROBE_HEADS.contains(&head) {
        return true;
    }
    if command
        .split_whitespace()
        .any(|t| t == "--version" || t == "-V" || t == "-version" || t == "--help")
    {
        return true;
    }
    if PACKAGE_MANAGERS.contains(&head) {
        return matches!(sub_command(command), Some("list" | "show" | "freeze" | "info"));
    }
    false
}

/// Stage attribution for one command. `patched_before` says whether any
/// earlier step in the run already resolved to `Patching`; it decides
/// whether a test run is baseline inspection or verification.
pub fn stage_hint(command: &str, patched_before: bool) -> StageLabel {
    if is_dependency_command(command) {
        return StageLabel::DependencyInstallation;
    }
    if is_environment_probe(command) {
        return StageLabel::EnvironmentVerification;
    }
    if is_test_command(command) {
        return if patched_before { StageLabel::Verification } else { StageLabel::InspectionDebugging };
    }
    if classify_kind(command) == StepKind::Change {
        return StageLabel::Patching;
    }
    StageLabel::InspectionDebugging
}

/// Path-like tokens a command targets: anything with a directory separator
/// or a file extension, with quotes and redirect markers stripped.
pub fn command_paths(command: &str) -> BTreeSet<String> {
    let mut paths = BTreeSet::new();
    for raw in command.split_whitespace() {
        let tok = raw.trim_matches(|c| matches!(c, '\'' | '"' | '>' | '<' | ';' | ','));
        if tok.is_empty() || tok.starts_with('-') || tok.contains("/dev/null") {
            continue;
        }
        let has_sep = tok.contains('/');
        let has_ext = tok
            .rsplit_once('.')
            .is_some_and(|(base, ext)| {
                !base.is_empty()
                    && !ext.is_empty()
                    && ext.len() <= 5
                    && ext.chars().all(|c| c.is_ascii_alphanumeric())
            });
        if has_sep || has_ext {
            paths.insert(tok.to_string());
        }
    }
    paths
}
