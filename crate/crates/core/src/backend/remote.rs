//! Blocking client for an OpenAI-compatible `/chat/completions` endpoint.

use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{AgentRole, BackendError, ChatBackend, ChatRequest, ChatResponse, Usage};
use crate::conversation::Role;
use crate::prompts::{estimate_context, estimate_messages};

pub const API_BASE_ENV: &str = "ATRIS_API_BASE";
pub const API_KEY_ENV: &str = "ATRIS_API_KEY";

#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub default_model: String,
    pub role_models: BTreeMap<AgentRole, String>,
    pub max_retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            api_key: None,
            default_model: model.into(),
            role_models: BTreeMap::new(),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(300),
        }
    }

    /// Reads `ATRIS_API_BASE` (required) and `ATRIS_API_KEY` (optional).
    pub fn from_env(model: impl Into<String>) -> Option<Self> {
        let base = std::env::var(API_BASE_ENV).ok().filter(|s| !s.is_empty())?;
        let mut config = RemoteConfig::new(base, model);
        config.api_key = std::env::var(API_KEY_ENV).ok().filter(|s| !s.is_empty());
        Some(config)
    }

    fn model_for(&self, role: AgentRole) -> &str {
        self.role_models.get(&role).unwrap_or(&self.default_model)
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
}

fn wire_role(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        // Observations are plain text, not native tool results.
        Role::Tool => "user",
    }
}

fn is_overflow(status: u16, body: &str) -> bool {
    if !matches!(status, 400 | 413 | 422) {
        return false;
    }
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded")
        || (lower.contains("context") && (lower.contains("length") || lower.contains("window")))
        || lower.contains("maximum context")
        || lower.contains("too many tokens")
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        RemoteBackend { config, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn body(&self, request: &ChatRequest, role: AgentRole) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({ "role": wire_role(m.role), "content": m.content }))
            .collect();
        let mut body = json!({
            "model": self.config.model_for(role),
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn parse(request: &ChatRequest, body: &str) -> Result<ChatResponse, String> {
        let value: Value = serde_json::from_str(body).map_err(|e| format!("bad response body: {e}"))?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or("response has no choices[0].message.content")?
            .to_string();
        let reported = |k: &str| value["usage"][k].as_u64();
        let usage = Usage {
            prompt_tokens: reported("prompt_tokens").unwrap_or_else(|| estimate_messages(&request.messages) as u64),
            completion_tokens: reported("completion_tokens").unwrap_or_else(|| estimate_context(&text) as u64),
        };
        Ok(ChatResponse { text, usage })
    }
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
    Fatal(BackendError),
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, request: &ChatRequest, role: AgentRole) -> Result<ChatResponse, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = self.body(request, role);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(self.config.backoff * 2u32.saturating_pow(attempt - 1));
            }
            let mut builder = self.agent.post(&url);
            if let Some(key) = &self.config.api_key {
                builder = builder.header("Authorization", format!("Bearer {key}"));
            }
            let outcome = match builder.send_json(&body) {
                Err(e) => Attempt::Retry(e.to_string()),
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    let text = response.body_mut().read_to_string().unwrap_or_default();
                    if status == 200 {
                        match Self::parse(request, &text) {
                            Ok(r) => Attempt::Done(r),
                            Err(e) => Attempt::Retry(e),
                        }
                    } else if is_overflow(status, &text) {
                        Attempt::Fatal(BackendError::ContextOverflow(text))
                    } else if status == 429 || status >= 500 {
                        Attempt::Retry(format!("status {status}: {text}"))
                    } else {
                        Attempt::Fatal(BackendError::Rejected { status, body: text })
                    }
                }
            };
            match outcome {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    tracing::warn!(attempt, %msg, "chat completion failed");
                    last = msg;
                }
            }
        }
        Err(BackendError::Transport {
            attempts: self.config.max_retries + 1,
            message: last,
        })
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        RemoteEmbedder { config, agent }
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
        let body = json!({ "model": self.config.default_model, "input": text });
        let mut builder = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            builder = builder.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = builder.send_json(&body).map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().unwrap_or_default();
        if status != 200 {
            return Err(BackendError::Rejected { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| BackendError::Transport {
            attempts: 1,
            message: format!("bad embedding body: {e}"),
        })?;
        value["data"][0]["embedding"]
            .as_array()
            .map(|v| v.iter().filter_map(Value::as_f64).collect())
            .ok_or_else(|| BackendError::Transport {
                attempts: 1,
                message: "response has no data[0].embedding".into(),
            })
    }
}
