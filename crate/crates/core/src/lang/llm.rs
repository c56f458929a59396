//! Chat-completion client used for paraphrasing and phrase identification.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("LLM request timed out after {0:?}")]
    Timeout(Duration),
    #[error("LLM transport failure: {0}")]
    Transport(String),
    #[error("LLM refused the request: {0}")]
    Refusal(String),
    #[error("LLM client is in offline mode")]
    Offline,
}

/// A language model reachable by prompt.
///
/// Implementations must be callable from many threads at once; each call is
/// independent.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// Chat-completions URL.
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Forces every call to fail with [`LlmError::Offline`], so the
    /// rule-based fallbacks run.
    pub offline: bool,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            token_env: "OPENAI_API_KEY".into(),
            model: "gpt-3.5-turbo".into(),
            timeout_secs: 20,
            max_retries: 2,
            offline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub paraphrase: String,
    pub phrases: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            paraphrase: include_str!("../../prompts/paraphrase.txt").to_string(),
            phrases: include_str!("../../prompts/phrases.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Reads `paraphrase.txt` and `phrases.txt` from `dir`, falling back to the
    /// built-in template for any file that is missing.
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let defaults = Self::default();
        let read = |name: &str, fallback: String| -> std::io::Result<String> {
            match std::fs::read_to_string(dir.join(name)) {
                Ok(s) => Ok(s),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(fallback),
                Err(e) => Err(e),
            }
        };
        Ok(Self {
            paraphrase: read("paraphrase.txt", defaults.paraphrase)?,
            phrases: read("phrases.txt", defaults.phrases)?,
        })
    }

    pub fn render(template: &str, instruction: &str) -> String {
        template.replace("{instruction}", instruction)
    }
}

/// HTTP JSON client for OpenAI-style chat completion endpoints.
pub struct HttpLlmClient {
    config: LlmConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpLlmClient {
    pub fn new(config: LlmConfig) -> Self {
        let token = std::env::var(&config.token_env).ok();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            token,
            agent,
        }
    }

    fn attempt(&self, prompt: &str) -> Result<String, LlmError> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => {
                LlmError::Timeout(Duration::from_secs(self.config.timeout_secs))
            }
            other => LlmError::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Transport(format!("status {status}: {e}")))?;
        if status >= 400 {
            return Err(LlmError::Transport(format!("status {status}: {value}")));
        }
        parse_completion(&value)
    }
}

fn parse_completion(value: &Value) -> Result<String, LlmError> {
    let choice = &value["choices"][0];
    if choice["finish_reason"] == "content_filter" {
        return Err(LlmError::Refusal("content filter".into()));
    }
    if let Some(refusal) = choice["message"]["refusal"].as_str() {
        return Err(LlmError::Refusal(refusal.to_string()));
    }
    choice["message"]["content"]
        .as_str()
        .map(|s| s.trim().to_string())
        .ok_or_else(|| LlmError::Transport(format!("malformed completion: {value}")))
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        if self.config.offline {
            return Err(LlmError::Offline);
        }
        let mut last = LlmError::Offline;
        for attempt in 0..=self.config.max_retries {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(e @ LlmError::Refusal(_)) => return Err(e),
                Err(e) => {
                    log::warn!("llm attempt {attempt} failed: {e}");
                    last = e;
                }
            }
        }
        Err(last)
    }
}
