//! Chat-completions transport for the labeler.

use std::sync::Arc;
use std::time::Duration;

use cliplens_core::labeler::{ChatTransport, LlmClient, LlmError, RetryPolicy, RetryingClient};
use serde::Deserialize;
use serde_json::json;

use crate::config::LlmConfig;

pub const TOKEN_ENV: &str = "CLIPLENS_LLM_TOKEN";

/// Posts one user message per request with temperature 0.
pub struct HttpChatTransport {
    endpoint: String,
    model: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl HttpChatTransport {
    pub fn new(endpoint: &str, model: &str, token: Option<String>, timeout: Duration) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            token,
            http,
        })
    }
}

impl ChatTransport for HttpChatTransport {
    fn send(&self, prompt: &str) -> Result<String, LlmError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(LlmError::Transport(format!("status {status}: {text}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| LlmError::Transport(format!("reply body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::Transport("reply has no choices".into()))
    }
}

/// Builds the retrying client, or `None` when no endpoint is configured.
pub fn client_from_config(cfg: &LlmConfig) -> Result<Option<Arc<dyn LlmClient>>, LlmError> {
    let Some(endpoint) = &cfg.endpoint else {
        return Ok(None);
    };
    let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
    let transport = HttpChatTransport::new(endpoint, &cfg.model, token, Duration::from_secs(cfg.timeout_secs))?;
    let policy = RetryPolicy {
        retries: cfg.retries,
        base_delay: Duration::from_millis(cfg.base_delay_ms),
        min_interval: Duration::from_millis(cfg.min_interval_ms),
    };
    Ok(Some(Arc::new(RetryingClient::new(transport, policy))))
}
