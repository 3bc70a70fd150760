//! Minimal HTTP-backed model client. The endpoint receives one JSON body
//! per turn — system text plus the running transcript — and answers with a
//! JSON object whose `content` field is the assistant reply. Any reachable
//! service speaking that shape plugs in; nothing here assumes a vendor.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracer_core::diagnosis::{ChatMessage, ClientError, ModelClient};

#[derive(Serialize)]
struct CompletionRequest<'a> {
    system: &'a str,
    messages: &'a [ChatMessage],
}

#[derive(Deserialize)]
struct CompletionResponse {
    content: String,
}

/// Blocking HTTP client for a chat-completion endpoint.
pub struct HttpModelClient {
    url: String,
    key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpModelClient {
    pub fn new(url: impl Into<String>, key: Option<String>) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("client construction only sets a timeout");
        HttpModelClient { url: url.into(), key, http }
    }
}

impl ModelClient for HttpModelClient {
    fn complete(&mut self, system: &str, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let mut request = self
            .http
            .post(&self.url)
            .json(&CompletionRequest { system, messages });
        if let Some(key) = &self.key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| ClientError(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(ClientError(format!("endpoint returned {status}")));
        }
        let body: CompletionResponse =
            response.json().map_err(|e| ClientError(format!("bad response body: {e}")))?;
        Ok(body.content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_endpoint_reports_a_client_error() {
        // A loopback port with no listener refuses the connection immediately.
        let mut client = HttpModelClient::new("http://127.0.0.1:1/complete", None);
        let err = client.complete("system", &[ChatMessage::user("hello")]).unwrap_err();
        assert!(!err.0.is_empty());
    }
}
