//! Pluggable chat backends for the diagnosis protocol.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speaker of one transcript message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

/// One message in a diagnosis transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// Backend failure surfaced to the session loop.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("model client failure: {0}")]
pub struct ClientError(pub String);

/// Anything that can continue a diagnosis conversation: an HTTP-backed
/// model, a scripted stand-in for tests, or a recorded replay.
pub trait ModelClient {
    /// Produce the next assistant message given the system prompt and the
    /// conversation so far.
    fn complete(&mut self, system: &str, messages: &[ChatMessage]) -> Result<String, ClientError>;
}

/// Deterministic client that plays back a fixed list of responses; used to
/// exercise every protocol path without a live model.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    responses: VecDeque<String>,
}

impl ScriptedClient {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedClient { responses: responses.into_iter().map(Into::into).collect() }
    }

    /// Number of responses not yet consumed.
    pub fn remaining(&self) -> usize {
        self.responses.len()
    }
}

impl ModelClient for ScriptedClient {
    fn complete(&mut self, _system: &str, _messages: &[ChatMessage]) -> Result<String, ClientError> {
        self.responses
            .pop_front()
            .ok_or_else(|| ClientError("scripted client has no more responses".into()))
    }
}
